//! Symmetric eigendecomposition via cyclic Jacobi rotations.

use super::{frobenius_norm, Matrix};
use crate::error::{Error, Result};

/// Convergence: off-diagonal Frobenius mass relative to the input norm.
const OFF_DIAG_TOL: f64 = 1e-12;
/// Hard cap on full sweeps before reporting non-convergence.
const MAX_SWEEPS: usize = 100;
/// Input must be symmetric within this absolute tolerance.
const SYMMETRY_TOL: f64 = 1e-8;
/// Rounding-noise negatives are clamped to zero on output.
const NEGATIVE_CLAMP: f64 = -1e-10;

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted descending; `eigenvectors` holds the matching
/// eigenvectors as columns. Each column's sign is fixed so that its first
/// nonzero component is positive.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEigResult {
    /// `U diag(lambda) U^T`, the reconstruction of the decomposed matrix.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let u = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (k, &lam) in self.eigenvalues.iter().enumerate() {
                    acc += u.get(i, k) * lam * u.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// Eigendecomposition of the symmetric matrix `a`.
///
/// The input must be square and symmetric within `1e-8`; it is symmetrized
/// internally before iterating. Rotations with an exactly zero pivot are
/// skipped, so exact zero rows/columns keep exact unit eigenvectors.
pub fn sym_eig(a: &Matrix) -> Result<SymEigResult> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Shape(format!(
            "sym_eig requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL {
        return Err(Error::Numeric(format!(
            "sym_eig input asymmetric by {asym:.3e} (tolerance {SYMMETRY_TOL:.0e})"
        )));
    }

    // Work on the symmetrized copy.
    let mut m = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }

    let threshold = OFF_DIAG_TOL * frobenius_norm(&m);
    let mut v = Matrix::identity(n);

    let mut converged = false;
    let mut off = off_diagonal_norm(&m);
    for sweep in 0..MAX_SWEEPS {
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Once nearly converged, entries drowned out by the diagonal
                // are flushed to zero instead of rotated (Numerical Recipes).
                if sweep >= 4
                    && app.abs() + 100.0 * apq.abs() == app.abs()
                    && aqq.abs() + 100.0 * apq.abs() == aqq.abs()
                {
                    m.set(p, q, 0.0);
                    m.set(q, p, 0.0);
                    continue;
                }
                rotate(&mut m, &mut v, p, q, app, aqq, apq);
            }
        }
        off = off_diagonal_norm(&m);
    }
    if !converged && off > threshold {
        return Err(Error::Numeric(format!(
            "sym_eig did not converge after {MAX_SWEEPS} sweeps; off-diagonal residual {off:.3e}"
        )));
    }

    let mut eigenvalues: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    for lam in &mut eigenvalues {
        if *lam < 0.0 && *lam >= NEGATIVE_CLAMP {
            *lam = 0.0;
        }
    }

    // Stable descending sort: ties keep their pre-sort column order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eigenvalues[j].partial_cmp(&eigenvalues[i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();
    let mut u = v.select_columns(&order);

    // Deterministic sign: first nonzero component of each column positive.
    for c in 0..n {
        for r in 0..n {
            let val = u.get(r, c);
            if val != 0.0 {
                if val < 0.0 {
                    for i in 0..n {
                        let x = u.get(i, c);
                        u.set(i, c, -x);
                    }
                }
                break;
            }
        }
    }

    Ok(SymEigResult {
        eigenvalues,
        eigenvectors: u,
    })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let x = m.get(i, j);
                acc += x * x;
            }
        }
    }
    acc.sqrt()
}

/// One Jacobi rotation annihilating `m[p][q]`, applied to both triangles of
/// `m` and accumulated into the eigenvector matrix `v`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, app: f64, aqq: f64, apq: f64) {
    let n = m.rows();
    let theta = (aqq - app) / (2.0 * apq);
    // Stable tangent of the rotation angle; for |theta| -> inf this tends to
    // 1/(2 theta) without overflow.
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        1.0 / (theta - (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    m.set(p, p, app - t * apq);
    m.set(q, q, aqq + t * apq);
    m.set(p, q, 0.0);
    m.set(q, p, 0.0);

    for i in 0..n {
        if i == p || i == q {
            continue;
        }
        let aip = m.get(i, p);
        let aiq = m.get(i, q);
        let new_ip = aip - s * (aiq + tau * aip);
        let new_iq = aiq + s * (aip - tau * aiq);
        m.set(i, p, new_ip);
        m.set(p, i, new_ip);
        m.set(i, q, new_iq);
        m.set(q, i, new_iq);
    }
    for i in 0..n {
        let vip = v.get(i, p);
        let viq = v.get(i, q);
        v.set(i, p, vip - s * (viq + tau * vip));
        v.set(i, q, viq + s * (vip - tau * viq));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, transpose};

    fn max_off_identity(u: &Matrix) -> f64 {
        let gram = matmul(&transpose(u), u).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..gram.rows() {
            for j in 0..gram.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - target).abs());
            }
        }
        worst
    }

    fn deterministic_symmetric(n: usize, salt: u64) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        let mut state = salt.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2000) as f64 / 1000.0 - 1.0
        };
        for i in 0..n {
            for j in i..n {
                let v = next();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    #[test]
    fn diagonal_input_is_fixed_point() {
        let a = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let r = sym_eig(&a).unwrap();
        assert_eq!(r.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(r.eigenvectors, Matrix::identity(2));
    }

    #[test]
    fn analytic_2x2() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let r = sym_eig(&a).unwrap();
        assert!((r.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((r.eigenvalues[1] - 1.0).abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        // Sign convention: first nonzero component positive.
        assert!((r.eigenvectors.get(0, 0) - inv_sqrt2).abs() < 1e-12);
        assert!((r.eigenvectors.get(1, 0) - inv_sqrt2).abs() < 1e-12);
        assert!((r.eigenvectors.get(0, 1) - inv_sqrt2).abs() < 1e-12);
        assert!((r.eigenvectors.get(1, 1) + inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn random_3x3_reconstruction() {
        for salt in 0..20u64 {
            let a = deterministic_symmetric(3, salt);
            let r = sym_eig(&a).unwrap();
            let rec = r.reconstruct();
            let resid = frobenius_norm(&crate::linalg::scale_add(&a, 1.0, &rec, -1.0).unwrap());
            assert!(
                resid <= 1e-9 * frobenius_norm(&a).max(1.0),
                "residual {resid:.3e} for salt {salt}"
            );
        }
    }

    #[test]
    fn orthonormality_and_order() {
        for n in [2usize, 5, 8] {
            let a = deterministic_symmetric(n, 42 + n as u64);
            let r = sym_eig(&a).unwrap();
            assert!(max_off_identity(&r.eigenvectors) <= 1e-10);
            for w in r.eigenvalues.windows(2) {
                assert!(w[0] >= w[1], "eigenvalues not descending: {:?}", r.eigenvalues);
            }
        }
    }

    #[test]
    fn eigenvalue_sum_matches_trace() {
        let a = deterministic_symmetric(6, 7);
        let r = sym_eig(&a).unwrap();
        let trace: f64 = (0..6).map(|i| a.get(i, i)).sum();
        let sum: f64 = r.eigenvalues.iter().sum();
        assert!((trace - sum).abs() <= 1e-9 * trace.abs().max(1.0));
    }

    #[test]
    fn decomposition_involution() {
        let a = deterministic_symmetric(5, 11);
        let first = sym_eig(&a).unwrap();
        let second = sym_eig(&first.reconstruct()).unwrap();
        for (x, y) in first.eigenvalues.iter().zip(&second.eigenvalues) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn psd_rank_deficient_eigenvalues_clamped() {
        // x x^T for x = (1, 2, 3): rank one, two exact zero eigenvalues.
        let x = [1.0, 2.0, 3.0];
        let mut a = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                a.set(i, j, x[i] * x[j]);
            }
        }
        let r = sym_eig(&a).unwrap();
        assert!((r.eigenvalues[0] - 14.0).abs() < 1e-9);
        assert!(r.eigenvalues.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn zero_matrix_gives_identity_basis() {
        let r = sym_eig(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(r.eigenvalues, vec![0.0; 4]);
        assert_eq!(r.eigenvectors, Matrix::identity(4));
    }

    #[test]
    fn exact_zero_rows_keep_unit_eigenvectors() {
        // Support only on coordinates {0, 1}; rows/cols 2..4 exactly zero.
        let mut a = Matrix::zeros(4, 4);
        a.set(0, 0, 2.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        a.set(1, 1, 2.0);
        let r = sym_eig(&a).unwrap();
        // Two exact-zero eigenvalues whose eigenvectors are exact unit vectors.
        assert_eq!(r.eigenvalues[2], 0.0);
        assert_eq!(r.eigenvalues[3], 0.0);
        for c in [2usize, 3] {
            let col: Vec<f64> = (0..4).map(|i| r.eigenvectors.get(i, c)).collect();
            let ones = col.iter().filter(|&&v| v == 1.0).count();
            let zeros = col.iter().filter(|&&v| v == 0.0).count();
            assert_eq!((ones, zeros), (1, 3), "column {c} = {col:?}");
        }
    }

    #[test]
    fn non_square_rejected() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(sym_eig(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[0.5, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(Error::Numeric(_))));
    }
}
