//! Small dense symmetric helpers on row-major `d x d` slices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Eigenvalues in ascending order with matching unit eigenvectors (columns).
pub fn sym_eigen(m: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    debug_assert_eq!(m.len(), d * d);
    let mat = DMatrix::from_row_slice(d, d, m);
    let eig = mat.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

pub fn lambda_min(m: &[f64], d: usize) -> f64 {
    sym_eigen(m, d).0[0]
}

pub fn lambda_max(m: &[f64], d: usize) -> f64 {
    sym_eigen(m, d).0[d - 1]
}

pub fn trace(m: &[f64], d: usize) -> f64 {
    (0..d).map(|i| m[i * d + i]).sum()
}

/// Symmetric PSD square root by eigendecomposition.
///
/// Eigenvalues in `[-rel_tol * trace, 0)` are clamped to zero; anything more
/// negative is reported as `NonPsdCovariance` (with `particle` set by the caller).
pub fn psd_sqrt(m: &[f64], d: usize, rel_tol: f64, particle: usize) -> Result<Vec<f64>> {
    let tr = trace(m, d);
    let (values, vectors) = sym_eigen(m, d);
    let mut out = vec![0.0; d * d];
    for (lam, v) in values.iter().zip(&vectors) {
        if *lam < -rel_tol * tr.abs() {
            return Err(Error::NonPsdCovariance {
                particle,
                eigenvalue: *lam,
                trace: tr,
            });
        }
        let s = lam.max(0.0).sqrt();
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] += s * v[r] * v[c];
            }
        }
    }
    Ok(out)
}
