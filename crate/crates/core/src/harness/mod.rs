//! Sequential-task training: the outer loop over tasks, accuracy/backward
//! transfer metrics, and the full run report.
//!
//! After each task the trained trunk's features are folded into the running
//! covariance and fresh null-space bases are computed for the next task.
//! Accuracy on every seen task is recorded after each task, giving the
//! lower-triangular accuracy matrix that ACC and BWT are defined on.

pub mod synthetic;
pub mod verify;

use std::collections::BTreeSet;

use crate::covtrack::{accumulate_task_covariance, CovarianceState};
use crate::error::{Error, Result};
use crate::net::{accuracy, backward, batch_loss, forward, FeatureBatch, NetConfig, NetworkState};
use crate::nullspace::{compute_all, NullSpaceBasis};
use crate::optim::{projected_step, AdamParams, AdamState, LrSchedule};

/// One task's data: training and test splits with labels in
/// `[0, class_count)`.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    pub train_x: FeatureBatch,
    pub train_y: Vec<usize>,
    pub test_x: FeatureBatch,
    pub test_y: Vec<usize>,
    pub class_count: usize,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        if self.train_x.is_empty() || self.test_x.is_empty() {
            return Err(Error::Data(format!(
                "task {}: train and test sets must be non-empty",
                self.task_id
            )));
        }
        if self.train_x.len() != self.train_y.len() || self.test_x.len() != self.test_y.len() {
            return Err(Error::Data(format!(
                "task {}: sample/label count mismatch",
                self.task_id
            )));
        }
        for &y in self.train_y.iter().chain(&self.test_y) {
            if y >= self.class_count {
                return Err(Error::Data(format!(
                    "task {}: label {y} out of range for {} classes",
                    self.task_id, self.class_count
                )));
            }
        }
        Ok(())
    }
}

/// Lower-triangular matrix of test accuracies: row `t` holds the accuracy
/// on tasks `0..=t` measured after finishing task `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.rows.len() + 1, "row t must have t+1 entries");
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        self.rows.push(row);
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `i` after task `t`; defined only for `i <= t`.
    pub fn get(&self, t: usize, i: usize) -> f64 {
        assert!(i <= t, "cell ({t},{i}) is undefined");
        self.rows[t][i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Mean accuracy over all tasks after the last one: `(1/T) sum_i R[T-1][i]`.
pub fn compute_acc(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.task_count();
    if t == 0 {
        return Err(Error::Logic("ACC of an empty accuracy matrix".into()));
    }
    let last = &m.rows[t - 1];
    Ok(last.iter().sum::<f64>() / t as f64)
}

/// Backward transfer: `(1/(T-1)) sum_{i<T-1} (R[T-1][i] - R[i][i])`.
///
/// Undefined for a single task; returns `(0.0, false)` then.
pub fn compute_bwt(m: &AccuracyMatrix) -> Result<(f64, bool)> {
    let t = m.task_count();
    if t == 0 {
        return Err(Error::Logic("BWT of an empty accuracy matrix".into()));
    }
    if t == 1 {
        return Ok((0.0, false));
    }
    let sum: f64 = (0..t - 1).map(|i| m.get(t - 1, i) - m.get(i, i)).sum();
    Ok((sum / (t - 1) as f64, true))
}

/// Whether updates are projected into the null space or applied as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Nscl,
    PlainAdam,
}

/// Everything a run needs besides the data and the architecture.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub mode: Mode,
    pub a: f64,
    pub lr: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.a < 1.0 {
            return Err(Error::Config(format!("a must be >= 1, got {}", self.a)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step diagnostics row.
#[derive(Debug, Clone)]
pub struct StepDiag {
    pub task: usize,
    pub step: u64,
    pub loss: f64,
    pub dot: f64,
    pub g_norm: f64,
    pub dw_norm: f64,
}

/// Training-loss bracket of one task.
#[derive(Debug, Clone, Copy)]
pub struct TaskLossSummary {
    /// Full-train-set loss before the first step of the task.
    pub initial: f64,
    /// Full-train-set loss after the last step.
    pub final_loss: f64,
}

/// Aggregate statistics of `<dw, g>` over all steps of a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Condition2Stats {
    pub total_steps: u64,
    pub positive: u64,
    pub zeroish: u64,
    pub negative: u64,
    pub min_dot: f64,
}

impl Condition2Stats {
    fn record(&mut self, dot: f64) {
        if self.total_steps == 0 {
            self.min_dot = dot;
        } else {
            self.min_dot = self.min_dot.min(dot);
        }
        self.total_steps += 1;
        if dot > 1e-12 {
            self.positive += 1;
        } else if dot >= -1e-12 {
            self.zeroish += 1;
        } else {
            self.negative += 1;
        }
    }
}

/// Spectrum summary of one layer after a task.
#[derive(Debug, Clone)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub h: usize,
    pub k: usize,
    pub lambda_min: f64,
    pub cutoff: f64,
    pub r_proportion: f64,
    pub eigenvalues: Vec<f64>,
    pub retained: Vec<bool>,
}

/// Spectra of all layers, computed after one task was merged in.
#[derive(Debug, Clone)]
pub struct TaskSpectra {
    pub task: usize,
    pub layers: Vec<LayerSpectrum>,
}

/// Everything a sequential run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub accuracy: AccuracyMatrix,
    pub acc: f64,
    pub bwt: f64,
    pub bwt_defined: bool,
    pub spectra: Vec<TaskSpectra>,
    /// Row `t`: full-train-set loss of tasks `0..=t` after finishing task `t`.
    pub train_loss_after: Vec<Vec<f64>>,
    pub task_losses: Vec<TaskLossSummary>,
    pub cond2: Condition2Stats,
    pub diagnostics: Vec<StepDiag>,
    /// `(task, layer)` pairs whose null space was empty during training.
    pub empty_null_warnings: Vec<(usize, usize)>,
    pub covariance: CovarianceState,
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        Error::Logic(m) => Error::Logic(format!("{ctx}: {m}")),
        Error::Verification(m) => Error::Verification(format!("{ctx}: {m}")),
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{ctx}: {e}"))),
    }
}

/// Contiguous batch index ranges in dataset order.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

/// Dataset split into `(features, labels)` batches in its fixed order.
pub fn dataset_batches(x: &FeatureBatch, y: &[usize], batch_size: usize) -> Vec<(FeatureBatch, Vec<usize>)> {
    batch_ranges(x.len(), batch_size)
        .into_iter()
        .map(|(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            (x.select(&idx), y[s..e].to_vec())
        })
        .collect()
}

/// Trains one task with (optionally) projected steps; the head must already
/// exist and be unfrozen. Appends per-step diagnostics and returns the
/// task's loss bracket.
pub(crate) fn train_task(
    net: &mut NetworkState,
    task: &TaskDataset,
    basis: Option<&NullSpaceBasis>,
    settings: &RunSettings,
    diagnostics: &mut Vec<StepDiag>,
    cond2: &mut Condition2Stats,
    empty_null: &mut BTreeSet<(usize, usize)>,
) -> Result<TaskLossSummary> {
    let batches = dataset_batches(&task.train_x, &task.train_y, settings.batch_size);
    let mut adam = AdamState::new(net, task.task_id, settings.adam)?;
    let initial = batch_loss(net, &task.train_x, &task.train_y, task.task_id)?;
    let mut step: u64 = 0;
    for epoch in 1..=settings.epochs {
        let lr = settings.lr.rate_at(epoch);
        for (bx, by) in &batches {
            let ctx = format!("task {} step {}", task.task_id, step);
            let trace = forward(net, bx, task.task_id).map_err(|e| with_context(e, &ctx))?;
            let grads = backward(net, &trace, by).map_err(|e| with_context(e, &ctx))?;
            let cand = adam.candidate(&grads).map_err(|e| with_context(e, &ctx))?;
            let out = projected_step(net, &cand, basis, lr, task.task_id)
                .map_err(|e| with_context(e, &ctx))?;
            for &l in &out.empty_null_layers {
                if empty_null.insert((task.task_id, l)) {
                    eprintln!(
                        "warning: task {} layer {l}: empty null space, weights unchanged",
                        task.task_id
                    );
                }
            }
            cond2.record(out.dot_candidate);
            diagnostics.push(StepDiag {
                task: task.task_id,
                step,
                loss: grads.loss,
                dot: out.dot_candidate,
                g_norm: out.g_norm,
                dw_norm: out.dw_norm,
            });
            step += 1;
        }
    }
    let final_loss = batch_loss(net, &task.train_x, &task.train_y, task.task_id)?;
    Ok(TaskLossSummary { initial, final_loss })
}

fn spectra_from_basis(task: usize, basis: &NullSpaceBasis) -> TaskSpectra {
    TaskSpectra {
        task,
        layers: basis
            .layers
            .iter()
            .enumerate()
            .map(|(l, b)| LayerSpectrum {
                layer: l,
                h: b.dim(),
                k: b.k(),
                lambda_min: b.lambda_min,
                cutoff: b.cutoff,
                r_proportion: b.r_proportion,
                eigenvalues: b.all_eigenvalues.clone(),
                retained: b.retained.clone(),
            })
            .collect(),
    }
}

/// Runs the full task sequence and assembles the report.
///
/// For each task: train (projected for tasks after the first in `Nscl`
/// mode), freeze the head, fold the task's features into the running
/// covariance, recompute the null-space bases, then evaluate on every seen
/// task. Fully deterministic for fixed inputs and seed.
pub fn run_sequence(
    tasks: &[TaskDataset],
    net_cfg: &NetConfig,
    settings: &RunSettings,
) -> Result<RunReport> {
    settings.validate()?;
    if tasks.is_empty() {
        return Err(Error::Data("task stream is empty".into()));
    }
    {
        let mut seen = BTreeSet::new();
        for t in tasks {
            t.validate()?;
            if !seen.insert(t.task_id) {
                return Err(Error::Data(format!("duplicate task id {}", t.task_id)));
            }
        }
    }

    let mut net = NetworkState::new(net_cfg, settings.seed)?;
    let mut cov = CovarianceState::new(&net);
    let mut basis: Option<NullSpaceBasis> = None;

    let mut accuracy_matrix = AccuracyMatrix::new();
    let mut spectra = Vec::new();
    let mut train_loss_after = Vec::new();
    let mut task_losses = Vec::new();
    let mut diagnostics = Vec::new();
    let mut cond2 = Condition2Stats::default();
    let mut empty_null = BTreeSet::new();

    for (idx, task) in tasks.iter().enumerate() {
        let ctx = format!("task {} (index {idx})", task.task_id);
        net.add_head(task.task_id, task.class_count)
            .map_err(|e| with_context(e, &ctx))?;
        let train_basis = match settings.mode {
            Mode::Nscl if idx > 0 => basis.as_ref(),
            _ => None,
        };
        let losses = train_task(
            &mut net,
            task,
            train_basis,
            settings,
            &mut diagnostics,
            &mut cond2,
            &mut empty_null,
        )?;
        task_losses.push(losses);
        net.freeze_head(task.task_id).map_err(|e| with_context(e, &ctx))?;

        // Feature capture with the just-trained weights, then merge and
        // recompute the bases (also in plain mode, for identical artifacts).
        let capture = dataset_batches(&task.train_x, &task.train_y, settings.batch_size);
        let task_cov = accumulate_task_covariance(&net, &capture, task.task_id)
            .map_err(|e| with_context(e, &ctx))?;
        cov.merge(&task_cov).map_err(|e| with_context(e, &ctx))?;
        let next_basis = compute_all(&cov, settings.a).map_err(|e| with_context(e, &ctx))?;
        spectra.push(spectra_from_basis(task.task_id, &next_basis));
        basis = Some(next_basis);

        let mut acc_row = Vec::with_capacity(idx + 1);
        let mut loss_row = Vec::with_capacity(idx + 1);
        for prev in &tasks[..=idx] {
            acc_row.push(
                accuracy(&net, &prev.test_x, &prev.test_y, prev.task_id)
                    .map_err(|e| with_context(e, &ctx))?,
            );
            loss_row.push(
                batch_loss(&net, &prev.train_x, &prev.train_y, prev.task_id)
                    .map_err(|e| with_context(e, &ctx))?,
            );
        }
        accuracy_matrix.push_row(acc_row);
        train_loss_after.push(loss_row);
    }

    let acc = compute_acc(&accuracy_matrix)?;
    let (bwt, bwt_defined) = compute_bwt(&accuracy_matrix)?;
    Ok(RunReport {
        accuracy: accuracy_matrix,
        acc,
        bwt,
        bwt_defined,
        spectra,
        train_loss_after,
        task_losses,
        cond2,
        diagnostics,
        empty_null_warnings: empty_null.into_iter().collect(),
        covariance: cov,
    })
}
