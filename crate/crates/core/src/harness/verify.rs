//! Executable verifiers for the stability and plasticity properties.
//!
//! Each verifier builds its own seeded instance, runs the real training
//! machinery, and reports measured residuals; callers decide against which
//! tolerances to hold them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::covtrack::{accumulate_task_covariance, CovarianceState};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, matmul, scale_add, transpose, Matrix};
use crate::net::{
    accuracy, argmax_rows, batch_loss, forward, BiasMode, FeatureBatch, InputShape, LayerSpec,
    NetConfig, NetworkState,
};
use crate::nullspace::compute_null_basis;
use crate::optim::{AdamParams, LrSchedule};

use super::synthetic::{desk_benchmark, gaussian_tasks, GaussianSpec};
use super::{
    dataset_batches, run_sequence, train_task, Condition2Stats, Mode, RunSettings, TaskDataset,
};

// ---------------------------------------------------------------------------
// lemma1 suite: exact stability when training inside an exact null space.

/// Measured drift of task-1 outputs and features after training task 2
/// inside task 1's null space.
#[derive(Debug, Clone)]
pub struct Lemma1Report {
    pub relu: bool,
    pub task2_steps: u64,
    /// Max absolute logit change on task-1 data.
    pub output_drift: f64,
    /// Max absolute change of any linear layer's input features (head input
    /// included) on task-1 data.
    pub max_feature_drift: f64,
    /// Exact-zero eigenvalues per layer after task 1.
    pub zero_eig_counts: Vec<usize>,
    pub task1_accuracy_before: f64,
    pub task1_accuracy_after: f64,
    pub predictions_identical: bool,
    /// Task-1 training loss before/after task 2.
    pub task1_loss_before: f64,
    pub task1_loss_after: f64,
}

impl Lemma1Report {
    pub fn task1_loss_rel_change(&self) -> f64 {
        (self.task1_loss_after - self.task1_loss_before).abs() / self.task1_loss_before.max(1e-12)
    }
}

/// Task 1: four distinct points supported on the first four of eight input
/// coordinates, each repeated, so every layer's feature matrix has rank at
/// most four and the covariances have exact zero eigenvalues.
fn lemma1_task1(reps: usize) -> TaskDataset {
    let dim = 8;
    let classes = 4;
    let mut train = Vec::with_capacity(reps * classes * dim);
    let mut labels = Vec::with_capacity(reps * classes);
    for _ in 0..reps {
        for c in 0..classes {
            let mut p = vec![0.0; dim];
            p[c] = 2.0;
            // A second nonzero coordinate keeps the points off the axes.
            p[(c + 1) % 4] = -1.0;
            train.extend_from_slice(&p);
            labels.push(c);
        }
    }
    let test: Vec<f64> = train[..classes * dim].to_vec();
    TaskDataset {
        task_id: 0,
        train_x: FeatureBatch::Flat(Matrix::new(reps * classes, dim, train)),
        train_y: labels,
        test_x: FeatureBatch::Flat(Matrix::new(classes, dim, test)),
        test_y: (0..classes).collect(),
        class_count: classes,
    }
}

fn lemma1_net_config(relu: bool) -> NetConfig {
    let mut layers = vec![LayerSpec::Dense { in_dim: 8, out_dim: 8, bias: BiasMode::Augmented }];
    if relu {
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { in_dim: 8, out_dim: 8, bias: BiasMode::Augmented });
    if relu {
        layers.push(LayerSpec::Relu);
    }
    NetConfig { input: InputShape::Flat(8), layers, head_bias: BiasMode::Augmented }
}

/// Trains task 1 on the rank-deficient construction, computes its exact
/// null space, trains task 2 inside it, and measures task-1 drift.
pub fn verify_lemma1(seed: u64, relu: bool, task2_epochs: usize) -> Result<Lemma1Report> {
    let task1 = lemma1_task1(16);
    let task2 = {
        let spec = GaussianSpec {
            tasks: 1,
            classes: 4,
            dim: 8,
            train_per_class: 16,
            test_per_class: 4,
            mean_radius: 2.0,
            std: 0.3,
            coord_decay: 1.0,
        };
        let mut t = gaussian_tasks(&spec, seed ^ 0x5eed).remove(0);
        t.task_id = 1;
        t
    };

    let cfg = lemma1_net_config(relu);
    let settings1 = RunSettings {
        mode: Mode::Nscl,
        a: 1.0,
        lr: LrSchedule::new(1e-3, vec![], 0.5),
        epochs: 30,
        batch_size: 8,
        seed,
        adam: AdamParams::default(),
    };

    let mut net = NetworkState::new(&cfg, seed)?;
    let mut diagnostics = Vec::new();
    let mut cond2 = Condition2Stats::default();
    let mut empty_null = std::collections::BTreeSet::new();

    net.add_head(0, task1.class_count)?;
    train_task(&mut net, &task1, None, &settings1, &mut diagnostics, &mut cond2, &mut empty_null)?;
    net.freeze_head(0)?;

    let mut cov = CovarianceState::new(&net);
    let capture = dataset_batches(&task1.train_x, &task1.train_y, settings1.batch_size);
    cov.merge(&accumulate_task_covariance(&net, &capture, 0)?)?;
    let basis = crate::nullspace::compute_all(&cov, 1.0)?;

    // The construction must leave exact zeros: at least dim+1-4 per layer
    // (augmented features of at most four distinct points).
    let zero_eig_counts: Vec<usize> = basis
        .layers
        .iter()
        .map(|l| l.all_eigenvalues.iter().filter(|&&v| v == 0.0).count())
        .collect();
    for (l, (&zeros, layer)) in zero_eig_counts.iter().zip(&basis.layers).enumerate() {
        let expected = layer.dim().saturating_sub(4);
        if zeros < expected {
            return Err(Error::Verification(format!(
                "rank-deficient construction failed: layer {l} has {zeros} zero eigenvalues, expected >= {expected}"
            )));
        }
    }

    let trace_before = forward(&net, &task1.train_x, 0)?;
    let feats_before: Vec<Matrix> = trace_before
        .linear_inputs()
        .into_iter()
        .cloned()
        .chain(std::iter::once(trace_before.head_input.clone()))
        .collect();
    let acc_before = accuracy(&net, &task1.test_x, &task1.test_y, 0)?;
    let loss_before = batch_loss(&net, &task1.train_x, &task1.train_y, 0)?;

    let settings2 = RunSettings {
        mode: Mode::Nscl,
        a: 1.0,
        lr: LrSchedule::default(),
        epochs: task2_epochs.max(1),
        batch_size: 8,
        seed,
        adam: AdamParams::default(),
    };
    net.add_head(1, task2.class_count)?;
    let mut task2_steps = 0;
    if task2_epochs > 0 {
        let before = diagnostics.len();
        train_task(
            &mut net,
            &task2,
            Some(&basis),
            &settings2,
            &mut diagnostics,
            &mut cond2,
            &mut empty_null,
        )?;
        task2_steps = (diagnostics.len() - before) as u64;
    }

    let trace_after = forward(&net, &task1.train_x, 0)?;
    let feats_after: Vec<Matrix> = trace_after
        .linear_inputs()
        .into_iter()
        .cloned()
        .chain(std::iter::once(trace_after.head_input.clone()))
        .collect();

    let output_drift = trace_before.logits.max_abs_diff(&trace_after.logits);
    let max_feature_drift = feats_before
        .iter()
        .zip(&feats_after)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    let acc_after = accuracy(&net, &task1.test_x, &task1.test_y, 0)?;
    let loss_after = batch_loss(&net, &task1.train_x, &task1.train_y, 0)?;

    Ok(Lemma1Report {
        relu,
        task2_steps,
        output_drift,
        max_feature_drift,
        zero_eig_counts,
        task1_accuracy_before: acc_before,
        task1_accuracy_after: acc_after,
        predictions_identical: argmax_rows(&trace_before.logits)
            == argmax_rows(&trace_after.logits),
        task1_loss_before: loss_before,
        task1_loss_after: loss_after,
    })
}

// ---------------------------------------------------------------------------
// Loss retention on the desk benchmark.

#[derive(Debug, Clone)]
pub struct RetentionReport {
    /// Row `t`: training loss of tasks `0..=t` after finishing task `t`.
    pub loss_after: Vec<Vec<f64>>,
    /// Worst relative increase of task-0 training loss over later tasks.
    pub max_rel_increase_task0: f64,
}

pub fn loss_retention(
    tasks: &[TaskDataset],
    cfg: &NetConfig,
    settings: &RunSettings,
) -> Result<RetentionReport> {
    let report = run_sequence(tasks, cfg, settings)?;
    Ok(retention_from_losses(report.train_loss_after))
}

fn retention_from_losses(loss_after: Vec<Vec<f64>>) -> RetentionReport {
    let base = loss_after[0][0];
    let max_rel_increase_task0 = loss_after
        .iter()
        .skip(1)
        .map(|row| (row[0] - base) / base.max(1e-12))
        .fold(0.0, f64::max);
    RetentionReport { loss_after, max_rel_increase_task0 }
}

// ---------------------------------------------------------------------------
// Stability/plasticity sweep over the threshold factor a.

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub a: f64,
    pub acc: f64,
    pub bwt: f64,
    pub task0_rel_loss_increase: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Larger a must not improve backward transfer.
    pub fn bwt_non_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].bwt <= w[0].bwt + 1e-12)
    }

    /// Task-0 loss drift must not shrink as a grows.
    pub fn retention_non_decreasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].task0_rel_loss_increase >= w[0].task0_rel_loss_increase - 1e-12)
    }
}

/// Runs the desk benchmark at each `a` with everything else fixed.
pub fn stability_plasticity_sweep(seed: u64, a_values: &[f64]) -> Result<SweepReport> {
    let mut points = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let (tasks, cfg, settings) = desk_benchmark(Mode::Nscl, a, seed);
        let report = run_sequence(&tasks, &cfg, &settings)?;
        let retention = retention_from_losses(report.train_loss_after.clone());
        points.push(SweepPoint {
            a,
            acc: report.acc,
            bwt: report.bwt,
            task0_rel_loss_increase: retention.max_rel_increase_task0,
        });
    }
    Ok(SweepReport { points })
}

// ---------------------------------------------------------------------------
// Forgetting contrast against the plain-Adam baseline.

#[derive(Debug, Clone, Copy)]
pub struct ContrastReport {
    pub nscl_acc: f64,
    pub nscl_bwt: f64,
    pub plain_acc: f64,
    pub plain_bwt: f64,
}

impl ContrastReport {
    pub fn bwt_gap(&self) -> f64 {
        self.nscl_bwt - self.plain_bwt
    }
}

/// Same seed, same data, same schedule; only the projection differs.
pub fn forgetting_contrast(seed: u64, a: f64) -> Result<ContrastReport> {
    let (tasks, cfg, settings) = desk_benchmark(Mode::Nscl, a, seed);
    let nscl = run_sequence(&tasks, &cfg, &settings)?;
    let (tasks_p, cfg_p, settings_p) = desk_benchmark(Mode::PlainAdam, a, seed);
    let plain = run_sequence(&tasks_p, &cfg_p, &settings_p)?;
    Ok(ContrastReport {
        nscl_acc: nscl.acc,
        nscl_bwt: nscl.bwt,
        plain_acc: plain.acc,
        plain_bwt: plain.bwt,
    })
}

// ---------------------------------------------------------------------------
// Plasticity: inner-product sign and per-task loss reduction.

#[derive(Debug, Clone)]
pub struct PlasticityReport {
    pub total_steps: u64,
    pub negative_steps: u64,
    pub min_dot: f64,
    /// `(initial, final)` training loss per task.
    pub task_losses: Vec<(f64, f64)>,
}

impl PlasticityReport {
    pub fn all_tasks_halved_loss(&self) -> bool {
        self.task_losses.iter().all(|(i, f)| *f <= 0.5 * *i)
    }
}

/// Full desk-benchmark run; reports Condition-2 statistics and the loss
/// bracket of every task.
pub fn plasticity_battery(seed: u64, a: f64) -> Result<PlasticityReport> {
    let (tasks, cfg, settings) = desk_benchmark(Mode::Nscl, a, seed);
    let report = run_sequence(&tasks, &cfg, &settings)?;
    Ok(PlasticityReport {
        total_steps: report.cond2.total_steps,
        negative_steps: report.cond2.negative,
        min_dot: report.cond2.min_dot,
        task_losses: report
            .task_losses
            .iter()
            .map(|l| (l.initial, l.final_loss))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Projector algebra battery on random PSD covariances.

#[derive(Debug, Clone, Copy)]
pub struct ProjectorReport {
    pub cases: usize,
    pub max_idempotence_residual: f64,
    pub max_symmetry_residual: f64,
    pub max_orthonormality_residual: f64,
}

/// Builds 20 seeded random PSD covariances (h = 16 and 64) and checks the
/// projector algebra at a in {1, 10, 50}.
pub fn projector_battery(seed: u64) -> Result<ProjectorReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut report = ProjectorReport {
        cases: 0,
        max_idempotence_residual: 0.0,
        max_symmetry_residual: 0.0,
        max_orthonormality_residual: 0.0,
    };
    for &h in &[16usize, 64] {
        for _ in 0..10 {
            let n = 2 * h;
            let mut x = Matrix::zeros(n, h);
            for r in 0..n {
                for c in 0..h {
                    // Column decay gives the spectrum a realistic tail.
                    x.set(r, c, normal.sample(&mut rng) * 0.92f64.powi(c as i32));
                }
            }
            let gram = matmul(&transpose(&x), &x)?;
            let cov = gram.map(|v| v / n as f64);
            let cov = {
                let mut s = cov.clone();
                for i in 0..h {
                    for j in (i + 1)..h {
                        let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
                        s.set(i, j, v);
                        s.set(j, i, v);
                    }
                }
                s
            };
            for &a in &[1.0, 10.0, 50.0] {
                let basis = compute_null_basis(&cov, a)?;
                let p = matmul(&basis.u2, &transpose(&basis.u2))?;
                let p2 = matmul(&p, &p)?;
                let idem = frobenius_norm(&scale_add(&p2, 1.0, &p, -1.0)?);
                let sym = p.max_abs_diff(&transpose(&p));
                let gram_u = matmul(&transpose(&basis.u2), &basis.u2)?;
                let mut orth: f64 = 0.0;
                for i in 0..gram_u.rows() {
                    for j in 0..gram_u.cols() {
                        let target = if i == j { 1.0 } else { 0.0 };
                        orth = orth.max((gram_u.get(i, j) - target).abs());
                    }
                }
                report.cases += 1;
                report.max_idempotence_residual = report.max_idempotence_residual.max(idem);
                report.max_symmetry_residual = report.max_symmetry_residual.max(sym);
                report.max_orthonormality_residual = report.max_orthonormality_residual.max(orth);
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Covariance battery: merge vs one-shot, the hand example, null equivalence.

#[derive(Debug, Clone, Copy)]
pub struct CovarianceReport {
    pub merge_relative_error: f64,
    pub accumulate_example_exact: bool,
    pub null_space_equivalence: bool,
    pub probes: usize,
}

fn passthrough_net(dim: usize) -> Result<NetworkState> {
    let cfg = NetConfig {
        input: InputShape::Flat(dim),
        layers: vec![LayerSpec::Dense { in_dim: dim, out_dim: dim, bias: BiasMode::None }],
        head_bias: BiasMode::None,
    };
    let mut net = NetworkState::new(&cfg, 0)?;
    net.add_head(0, 2)?;
    Ok(net)
}

fn rows_as_batch(m: &Matrix, rows: &[usize]) -> (FeatureBatch, Vec<usize>) {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    (
        FeatureBatch::Flat(Matrix::new(rows.len(), m.cols(), data)),
        vec![0; rows.len()],
    )
}

/// Random 3-way partition of a 1000x32 feature matrix: merging the three
/// partial covariances must match the one-shot computation; plus the exact
/// hand example and the null-space equivalence probe.
pub fn covariance_battery(seed: u64) -> Result<CovarianceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Merge vs one-shot.
    let (n, dim) = (1000usize, 32usize);
    let features = {
        let data: Vec<f64> = (0..n * dim).map(|_| normal.sample(&mut rng)).collect();
        Matrix::new(n, dim, data)
    };
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for r in 0..n {
        groups[rng.random_range(0..3)].push(r);
    }
    for g in 0..3 {
        if groups[g].is_empty() {
            let donor = (0..3).find(|&d| groups[d].len() > 1).expect("non-degenerate partition");
            let moved = groups[donor].pop().expect("donor row");
            groups[g].push(moved);
        }
    }
    let net = passthrough_net(dim)?;
    let mut state = CovarianceState::new(&net);
    for g in &groups {
        let batch = rows_as_batch(&features, g);
        state.merge(&accumulate_task_covariance(&net, &[batch], 0)?)?;
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let oneshot = accumulate_task_covariance(&net, &[rows_as_batch(&features, &all_rows)], 0)?;
    let diff = scale_add(&state.covariances()[0], 1.0, &oneshot.cov[0], -1.0)?;
    let merge_relative_error =
        frobenius_norm(&diff) / frobenius_norm(&oneshot.cov[0]).max(f64::MIN_POSITIVE);

    // Hand example, exact.
    let net2 = passthrough_net(2)?;
    let example = accumulate_task_covariance(
        &net2,
        &[(
            FeatureBatch::Flat(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])),
            vec![0, 0],
        )],
        0,
    )?;
    let accumulate_example_exact =
        example.cov[0] == Matrix::from_rows(&[&[5.0, 7.0], &[7.0, 10.0]]);

    // Null-space equivalence on a rank-deficient feature matrix.
    let (rows, rank, width) = (120usize, 5usize, 8usize);
    let g = Matrix::new(rows, rank, (0..rows * rank).map(|_| normal.sample(&mut rng)).collect());
    let b = Matrix::new(rank, width, (0..rank * width).map(|_| normal.sample(&mut rng)).collect());
    let xbar = matmul(&g, &b)?;
    let net8 = passthrough_net(width)?;
    let all: Vec<usize> = (0..rows).collect();
    let cov = accumulate_task_covariance(&net8, &[rows_as_batch(&xbar, &all)], 0)?.cov[0].clone();
    let eig = crate::linalg::sym_eig(&cov)?;
    let mut probes = 0;
    let mut null_space_equivalence = true;
    for c in 0..eig.eigenvectors.cols() {
        let v = eig.eigenvectors.select_columns(&[c]);
        let cov_v = frobenius_norm(&matmul(&cov, &v)?);
        let x_v = frobenius_norm(&matmul(&xbar, &v)?);
        probes += 1;
        if (cov_v <= 1e-10) != (x_v <= 1e-8) {
            null_space_equivalence = false;
        }
    }

    Ok(CovarianceReport {
        merge_relative_error,
        accumulate_example_exact,
        null_space_equivalence,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemma1_zero_steps_zero_drift() {
        let report = verify_lemma1(5, true, 0).unwrap();
        assert_eq!(report.task2_steps, 0);
        assert_eq!(report.output_drift, 0.0);
        assert_eq!(report.max_feature_drift, 0.0);
        assert!(report.predictions_identical);
    }

    #[test]
    fn lemma1_construction_has_exact_zeros() {
        let report = verify_lemma1(5, false, 2).unwrap();
        for (l, &z) in report.zero_eig_counts.iter().enumerate() {
            assert!(z >= 5, "layer {l}: {z} zero eigenvalues");
        }
    }

    #[test]
    fn covariance_battery_passes() {
        let report = covariance_battery(77).unwrap();
        assert!(report.merge_relative_error <= 1e-12, "{:.3e}", report.merge_relative_error);
        assert!(report.accumulate_example_exact);
        assert!(report.null_space_equivalence);
        assert_eq!(report.probes, 8);
    }

    #[test]
    fn exact_null_space_retains_task1_loss_and_predictions() {
        let report = verify_lemma1(19, true, 20).unwrap();
        assert!(
            report.task1_loss_rel_change() <= 1e-6,
            "relative loss change {:.3e}",
            report.task1_loss_rel_change()
        );
        assert!(report.predictions_identical);
        assert_eq!(report.task1_accuracy_before, report.task1_accuracy_after);
    }

    #[test]
    fn retention_within_ten_percent_at_small_a() {
        let (tasks, cfg, settings) = desk_benchmark(Mode::Nscl, 1.0, 42);
        let report = loss_retention(&tasks, &cfg, &settings).unwrap();
        assert!(
            report.max_rel_increase_task0 <= 0.10,
            "task-0 loss drift {:.3}",
            report.max_rel_increase_task0
        );
        assert_eq!(report.loss_after.len(), tasks.len());
    }

    #[test]
    fn single_task_retention_is_the_training_curve_endpoint() {
        let spec = GaussianSpec {
            tasks: 1,
            classes: 3,
            dim: 8,
            train_per_class: 15,
            test_per_class: 5,
            mean_radius: 3.0,
            std: 0.5,
            coord_decay: 0.9,
        };
        let tasks = gaussian_tasks(&spec, 4);
        let cfg = super::super::synthetic::desk_net_config(8, 16);
        let mut settings = super::super::synthetic::desk_settings(Mode::Nscl, 10.0, 4);
        settings.epochs = 5;
        let report = loss_retention(&tasks, &cfg, &settings).unwrap();
        assert_eq!(report.loss_after.len(), 1);
        assert_eq!(report.max_rel_increase_task0, 0.0);
    }
}
