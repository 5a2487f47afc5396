//! Running per-layer uncentered feature covariance.
//!
//! After a task finishes, its training data is pushed through the trained
//! network once more and each linear layer's input features are folded into
//! `X^T X / n`. The running covariance is a sample-count weighted mean of
//! the per-task covariances, so its memory footprint stays `h x h` per
//! layer no matter how many tasks or samples went by.
//!
//! Row counts are tracked per layer: a conv layer sees one row per patch
//! position, a dense layer one row per sample, and the weighted merge is
//! only exact when each layer uses its own true row count.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{matmul, scale_add, transpose, Matrix};
use crate::net::{forward, FeatureBatch, NetworkState};

const CHECKPOINT_MAGIC: &[u8; 8] = b"NSCLCOV1";

/// Covariance of one layer's features over one task.
#[derive(Debug, Clone)]
pub struct TaskCovariance {
    /// `X^T X / n` per linear layer.
    pub cov: Vec<Matrix>,
    /// Rows accumulated per layer (patches for conv, samples for dense).
    pub rows: Vec<u64>,
}

/// Running covariance over all finished tasks.
#[derive(Debug, Clone)]
pub struct CovarianceState {
    cov: Vec<Matrix>,
    n_seen: Vec<u64>,
}

impl CovarianceState {
    /// Empty state shaped after the network's linear layers.
    pub fn new(net: &NetworkState) -> Self {
        let cov = net
            .weights()
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.rows()))
            .collect::<Vec<_>>();
        let n_seen = vec![0; cov.len()];
        Self { cov, n_seen }
    }

    pub fn layer_count(&self) -> usize {
        self.cov.len()
    }

    pub fn covariances(&self) -> &[Matrix] {
        &self.cov
    }

    pub fn rows_seen(&self) -> &[u64] {
        &self.n_seen
    }

    /// Folds one task's covariance in: the running value becomes the
    /// row-count weighted mean of old and new, re-symmetrized.
    pub fn merge(&mut self, task: &TaskCovariance) -> Result<()> {
        if task.cov.len() != self.cov.len() {
            return Err(Error::Shape(format!(
                "merge: {} layers into state with {}",
                task.cov.len(),
                self.cov.len()
            )));
        }
        for (l, (old, new)) in self.cov.iter_mut().zip(&task.cov).enumerate() {
            if (new.rows(), new.cols()) != (old.rows(), old.cols()) {
                return Err(Error::Shape(format!(
                    "merge: layer {l} covariance {}x{} into {}x{}",
                    new.rows(),
                    new.cols(),
                    old.rows(),
                    old.cols()
                )));
            }
            let n_old = self.n_seen[l];
            let n_new = task.rows[l];
            let total = n_old + n_new;
            if total == 0 {
                continue;
            }
            let merged = scale_add(
                old,
                n_old as f64 / total as f64,
                new,
                n_new as f64 / total as f64,
            )?;
            *old = symmetrize(&merged);
            self.n_seen[l] = total;
        }
        Ok(())
    }

    /// Binary checkpoint: magic, layer count, per-layer dim and row count,
    /// then each covariance as little-endian f64, row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.cov.len() as u32).to_le_bytes());
        for (cov, &n) in self.cov.iter().zip(&self.n_seen) {
            buf.extend_from_slice(&(cov.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&n.to_le_bytes());
        }
        for cov in &self.cov {
            for v in cov.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Data(format!(
                    "covariance checkpoint truncated at byte {pos}",
                    pos = *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("covariance checkpoint: bad magic".into()));
        }
        let layers = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(layers);
        let mut n_seen = Vec::with_capacity(layers);
        for _ in 0..layers {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            n_seen.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let mut cov = Vec::with_capacity(layers);
        for &d in &dims {
            let mut data = Vec::with_capacity(d * d);
            for _ in 0..d * d {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            cov.push(Matrix::new(d, d, data));
        }
        if pos != bytes.len() {
            return Err(Error::Data(format!(
                "covariance checkpoint: {} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Self { cov, n_seen })
    }
}

fn symmetrize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(i, j, 0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }
    out
}

/// Covariance of the features `net` produces on `batches`, per linear layer.
///
/// `batches` is the task's training data in its fixed order; the network is
/// only read, never updated. Returns `X^T X / n` with `n` counted per layer.
pub fn accumulate_task_covariance(
    net: &NetworkState,
    batches: &[(FeatureBatch, Vec<usize>)],
    task: usize,
) -> Result<TaskCovariance> {
    if batches.iter().all(|(x, _)| x.is_empty()) {
        return Err(Error::Data("covariance accumulation over empty dataset".into()));
    }
    let layer_count = net.linear_layer_count();
    let mut sums: Vec<Option<Matrix>> = vec![None; layer_count];
    let mut rows = vec![0u64; layer_count];
    for (x, _) in batches {
        if x.is_empty() {
            continue;
        }
        let trace = forward(net, x, task)?;
        for (l, feat) in trace.linear_inputs().into_iter().enumerate() {
            let gram = matmul(&transpose(feat), feat)?;
            sums[l] = Some(match sums[l].take() {
                Some(acc) => scale_add(&acc, 1.0, &gram, 1.0)?,
                None => gram,
            });
            rows[l] += feat.rows() as u64;
        }
    }
    let cov = sums
        .into_iter()
        .zip(&rows)
        .map(|(s, &n)| {
            let s = s.expect("non-empty dataset accumulated no features");
            Ok(symmetrize(&s.map(|v| v / n as f64)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskCovariance { cov, rows })
}
