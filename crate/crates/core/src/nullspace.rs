//! Approximate null space of a feature covariance.
//!
//! The eigenvectors of a layer's covariance whose eigenvalues fall at or
//! below `a * lambda_min` span the approximate null space; projecting a
//! candidate update onto that span (`u2 * u2^T * g`) keeps it from moving
//! the layer's response on previously seen features. The retained-mass
//! proportion `R` quantifies how good the approximation is.

use std::path::Path;

use crate::covtrack::CovarianceState;
use crate::error::{Error, Result};
use crate::linalg::{matmul, sym_eig, Matrix};

/// Eigenvalues at or below `1e-12 * lambda_max` count as zero; rounding
/// noise must not empty the null space when the true minimum is zero.
const ZERO_FLOOR_REL: f64 = 1e-12;

/// Null-space basis of one layer's covariance.
#[derive(Debug, Clone)]
pub struct LayerNullSpace {
    /// Orthonormal basis of the retained subspace, `h x k`.
    pub u2: Matrix,
    /// Retained eigenvalues, descending.
    pub lambda2: Vec<f64>,
    /// Full spectrum, descending (sub-floor values reported as zero).
    pub all_eigenvalues: Vec<f64>,
    /// Retained flag per spectrum entry.
    pub retained: Vec<bool>,
    pub lambda_min: f64,
    /// `a * lambda_min`.
    pub cutoff: f64,
    /// Retained share of the total eigenvalue mass; 1 when the trace is zero.
    pub r_proportion: f64,
}

impl LayerNullSpace {
    pub fn dim(&self) -> usize {
        self.u2.rows()
    }

    /// Number of retained directions.
    pub fn k(&self) -> usize {
        self.u2.cols()
    }
}

/// Per-layer null-space bases for a whole network.
#[derive(Debug, Clone)]
pub struct NullSpaceBasis {
    pub layers: Vec<LayerNullSpace>,
    pub a: f64,
}

/// Computes the approximate null space of a single covariance.
///
/// Selection is inclusive: eigenvalues with `lambda <= a * lambda_min` are
/// retained, plus any eigenvalue at or below the relative zero floor.
pub fn compute_null_basis(cov: &Matrix, a: f64) -> Result<LayerNullSpace> {
    if a < 1.0 {
        return Err(Error::Config(format!(
            "null-space threshold factor a must be >= 1, got {a}"
        )));
    }
    let eig = sym_eig(cov)?;
    if let Some(&worst) = eig
        .eigenvalues
        .iter()
        .find(|&&l| l < 0.0)
    {
        return Err(Error::Numeric(format!(
            "covariance is not PSD within tolerance: eigenvalue {worst:.3e}"
        )));
    }
    let lambda_max = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let floor = ZERO_FLOOR_REL * lambda_max;
    let all_eigenvalues: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l <= floor { 0.0 } else { l })
        .collect();
    let lambda_min = all_eigenvalues.last().copied().unwrap_or(0.0);
    let cutoff = a * lambda_min;
    let retained: Vec<bool> = all_eigenvalues.iter().map(|&l| l <= cutoff).collect();
    let idx: Vec<usize> = retained
        .iter()
        .enumerate()
        .filter_map(|(i, &r)| r.then_some(i))
        .collect();
    let u2 = eig.eigenvectors.select_columns(&idx);
    let lambda2: Vec<f64> = idx.iter().map(|&i| all_eigenvalues[i]).collect();
    let r_proportion = explained_proportion(&all_eigenvalues, &lambda2)?;
    Ok(LayerNullSpace {
        u2,
        lambda2,
        all_eigenvalues,
        retained,
        lambda_min,
        cutoff,
        r_proportion,
    })
}

/// Null-space bases for every layer of a covariance state.
pub fn compute_all(state: &CovarianceState, a: f64) -> Result<NullSpaceBasis> {
    let layers = state
        .covariances()
        .iter()
        .map(|cov| compute_null_basis(cov, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(NullSpaceBasis { layers, a })
}

/// Projects a candidate update onto the layer's null space: `u2 * (u2^T * g)`.
///
/// The `h x h` projector is never materialized.
pub fn project_update(basis: &LayerNullSpace, g: &Matrix) -> Result<Matrix> {
    if g.rows() != basis.u2.rows() {
        return Err(Error::Shape(format!(
            "project_update: gradient has {} rows, basis spans {}",
            g.rows(),
            basis.u2.rows()
        )));
    }
    let coeffs = matmul(&crate::linalg::transpose(&basis.u2), g)?;
    matmul(&basis.u2, &coeffs)
}

/// Share of total eigenvalue mass carried by the retained set.
///
/// `retained` must be a sub-multiset of `all` (exact value matches); the
/// ratio is 1 by convention when the total mass is zero.
pub fn explained_proportion(all: &[f64], retained: &[f64]) -> Result<f64> {
    if let Some(&bad) = all.iter().find(|&&l| l < 0.0) {
        return Err(Error::Logic(format!(
            "explained_proportion: negative eigenvalue {bad:.3e}"
        )));
    }
    let mut pool: Vec<f64> = all.to_vec();
    for &r in retained {
        match pool.iter().position(|&p| p == r) {
            Some(i) => {
                pool.swap_remove(i);
            }
            None => {
                return Err(Error::Logic(format!(
                    "explained_proportion: retained value {r} not present in the full spectrum"
                )))
            }
        }
    }
    let denom: f64 = all.iter().sum();
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(retained.iter().sum::<f64>() / denom)
}

/// Writes the spectrum dump for one basis: `layer_<l>.csv` with
/// `(index, eigenvalue, retained_flag)` rows and a `summary.csv` with
/// `(layer, h, k, lambda_min, cutoff, r)` rows.
pub fn write_spectra(basis: &NullSpaceBasis, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = String::from("layer,h,k,lambda_min,cutoff,r\n");
    for (l, layer) in basis.layers.iter().enumerate() {
        let mut csv = String::from("index,eigenvalue,retained\n");
        for (i, (&lam, &ret)) in layer.all_eigenvalues.iter().zip(&layer.retained).enumerate() {
            csv.push_str(&format!("{i},{lam},{}\n", u8::from(ret)));
        }
        write_atomic(&dir.join(format!("layer_{l}.csv")), csv.as_bytes())?;
        summary.push_str(&format!(
            "{l},{},{},{},{},{}\n",
            layer.dim(),
            layer.k(),
            layer.lambda_min,
            layer.cutoff,
            layer.r_proportion
        ));
    }
    write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
