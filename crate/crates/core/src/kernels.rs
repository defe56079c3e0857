//! Landau coefficients for generalized Maxwellian molecules.
//!
//! For a displacement `z = v - v_*`:
//!
//! ```text
//! a(z) = h(|z|^2) (|z|^2 I - z z^T)
//! b(z) = -(d - 1) h(|z|^2) z
//! ```
//!
//! and `sigma(z)` is the explicit square root `sigma sigma^T = a`, available
//! for `d = 2` and `d = 3`. The fixed-size `*_fixed` variants are the hot-path
//! versions used by the particle engine; the slice API returns `nalgebra`
//! matrices and validates dimensions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Collision kernel factor `h` with `lower <= h(r) <= upper` on `r >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HFunction {
    /// Maxwellian molecules: `h == value`.
    Constant { value: f64 },
    /// `h(r) = lower + (upper - lower) e^{-r}`.
    ExponentialFloor { lower: f64, upper: f64 },
    /// `h(r) = lower + (upper - lower) / (1 + r)`.
    RationalFloor { lower: f64, upper: f64 },
}

impl Default for HFunction {
    fn default() -> Self {
        HFunction::Constant { value: 1.0 }
    }
}

impl HFunction {
    #[inline(always)]
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            HFunction::Constant { value } => value,
            HFunction::ExponentialFloor { lower, upper } => lower + (upper - lower) * (-r).exp(),
            HFunction::RationalFloor { lower, upper } => lower + (upper - lower) / (1.0 + r),
        }
    }

    pub fn derivative(&self, r: f64) -> f64 {
        match *self {
            HFunction::Constant { .. } => 0.0,
            HFunction::ExponentialFloor { lower, upper } => -(upper - lower) * (-r).exp(),
            HFunction::RationalFloor { lower, upper } => -(upper - lower) / ((1.0 + r) * (1.0 + r)),
        }
    }

    /// The constant `m`.
    pub fn lower(&self) -> f64 {
        match *self {
            HFunction::Constant { value } => value,
            HFunction::ExponentialFloor { lower, .. } | HFunction::RationalFloor { lower, .. } => lower,
        }
    }

    /// The constant `M`.
    pub fn upper(&self) -> f64 {
        match *self {
            HFunction::Constant { value } => value,
            HFunction::ExponentialFloor { upper, .. } | HFunction::RationalFloor { upper, .. } => upper,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, HFunction::Constant { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let (m, big_m) = (self.lower(), self.upper());
        if !(m.is_finite() && big_m.is_finite()) || m <= 0.0 {
            return Err(Error::invalid("h", "bounds must be finite with m > 0"));
        }
        if m > big_m {
            return Err(Error::invalid("h", "requires m <= M"));
        }
        Ok(())
    }

    /// One representative of every registered kind.
    pub fn registry() -> [HFunction; 3] {
        [
            HFunction::Constant { value: 1.0 },
            HFunction::ExponentialFloor { lower: 0.5, upper: 2.0 },
            HFunction::RationalFloor { lower: 0.5, upper: 2.0 },
        ]
    }
}

/// Growth constant of `sigma`: `|sigma(z)|_F^2 = tr a(z) <= (d - 1) M |z|^2`.
pub fn sigma_growth_sq(d: usize, h: &HFunction) -> f64 {
    (d as f64 - 1.0) * h.upper()
}

/// Number of standard normals `sigma(z) xi` actually reads (the second column
/// of the 2-d matrix is zero).
pub const fn noise_components(d: usize) -> usize {
    if d == 2 {
        1
    } else {
        d
    }
}

#[inline(always)]
pub fn norm_sq<const D: usize>(z: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for zi in z {
        s += zi * zi;
    }
    s
}

#[inline(always)]
pub fn a_fixed<const D: usize>(z: &[f64; D], h: &HFunction) -> [[f64; D]; D] {
    let r = norm_sq(z);
    let hv = h.value(r);
    let mut a = [[0.0; D]; D];
    for i in 0..D {
        for j in 0..D {
            let delta = if i == j { r } else { 0.0 };
            a[i][j] = hv * (delta - z[i] * z[j]);
        }
    }
    a
}

#[inline(always)]
pub fn b_fixed<const D: usize>(z: &[f64; D], h: &HFunction) -> [f64; D] {
    let c = -(D as f64 - 1.0) * h.value(norm_sq(z));
    let mut b = [0.0; D];
    for i in 0..D {
        b[i] = c * z[i];
    }
    b
}

/// `sigma(z) xi / sqrt(h)` for `D in {2, 3}`; `xi` must hold
/// `noise_components(D)` normals.
#[inline(always)]
pub fn sigma_unit_apply<const D: usize>(z: &[f64; D], xi: &[f64]) -> [f64; D] {
    let mut out = [0.0; D];
    match D {
        2 => {
            out[0] = z[1] * xi[0];
            out[1] = -z[0] * xi[0];
        }
        3 => {
            out[0] = z[1] * xi[0] - z[2] * xi[1];
            out[1] = -z[0] * xi[0] + z[2] * xi[2];
            out[2] = z[0] * xi[1] - z[1] * xi[2];
        }
        _ => unreachable!("sigma is only defined for d = 2, 3"),
    }
    out
}

#[inline(always)]
pub fn sigma_fixed<const D: usize>(z: &[f64; D], h: &HFunction) -> [[f64; D]; D] {
    let s = h.value(norm_sq(z)).sqrt();
    let mut m = [[0.0; D]; D];
    match D {
        2 => {
            m[0][0] = s * z[1];
            m[1][0] = -s * z[0];
        }
        3 => {
            m[0][0] = s * z[1];
            m[0][1] = -s * z[2];
            m[1][0] = -s * z[0];
            m[1][2] = s * z[2];
            m[2][1] = s * z[0];
            m[2][2] = -s * z[1];
        }
        _ => unreachable!("sigma is only defined for d = 2, 3"),
    }
    m
}

fn check_general_dim(d: usize) -> Result<()> {
    if d < 2 {
        Err(Error::UnsupportedDimension(d))
    } else {
        Ok(())
    }
}

fn check_sigma_dim(d: usize) -> Result<()> {
    if d == 2 || d == 3 {
        Ok(())
    } else {
        Err(Error::UnsupportedDimension(d))
    }
}

pub fn eval_a(z: &[f64], h: &HFunction) -> Result<DMatrix<f64>> {
    let d = z.len();
    check_general_dim(d)?;
    let r: f64 = z.iter().map(|x| x * x).sum();
    let hv = h.value(r);
    Ok(DMatrix::from_fn(d, d, |i, j| {
        let delta = if i == j { r } else { 0.0 };
        hv * (delta - z[i] * z[j])
    }))
}

pub fn eval_b(z: &[f64], h: &HFunction) -> Result<DVector<f64>> {
    let d = z.len();
    check_general_dim(d)?;
    let r: f64 = z.iter().map(|x| x * x).sum();
    let c = -(d as f64 - 1.0) * h.value(r);
    Ok(DVector::from_iterator(d, z.iter().map(|zi| c * zi)))
}

pub fn eval_sigma(z: &[f64], h: &HFunction) -> Result<DMatrix<f64>> {
    let d = z.len();
    check_sigma_dim(d)?;
    Ok(match d {
        2 => {
            let m = sigma_fixed::<2>(&[z[0], z[1]], h);
            DMatrix::from_fn(2, 2, |i, j| m[i][j])
        }
        _ => {
            let m = sigma_fixed::<3>(&[z[0], z[1], z[2]], h);
            DMatrix::from_fn(3, 3, |i, j| m[i][j])
        }
    })
}

/// `a`, `b` and `sigma` evaluated together at one displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEval {
    pub z: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl CoefficientEval {
    pub fn at(z: &[f64], h: &HFunction) -> Result<Self> {
        Ok(Self {
            z: DVector::from_column_slice(z),
            a: eval_a(z, h)?,
            b: eval_b(z, h)?,
            sigma: eval_sigma(z, h)?,
        })
    }

    /// `max |sigma sigma^T - a|`.
    pub fn factorization_residual(&self) -> f64 {
        (&self.sigma * self.sigma.transpose() - &self.a).amax()
    }
}

/// `max_i |b_i(z) - sum_j d/dz_j a_ij(z)|` with central differences of step
/// `fd_step`.
///
/// The `h'` contributions to the row divergence cancel identically
/// (`2 h' (|z|^2 z_i - z_i |z|^2) = 0`), so the residual is small for every
/// registered `h`, not only the constant one.
pub fn check_divergence_identity(z: &[f64], h: &HFunction, fd_step: f64) -> Result<f64> {
    if !(fd_step > 0.0) {
        return Err(Error::invalid("fd_step", "must be positive"));
    }
    let d = z.len();
    let b = eval_b(z, h)?;
    let mut div = vec![0.0; d];
    let mut zp = z.to_vec();
    let mut zm = z.to_vec();
    for j in 0..d {
        zp[j] = z[j] + fd_step;
        zm[j] = z[j] - fd_step;
        let ap = eval_a(&zp, h)?;
        let am = eval_a(&zm, h)?;
        for i in 0..d {
            div[i] += (ap[(i, j)] - am[(i, j)]) / (2.0 * fd_step);
        }
        zp[j] = z[j];
        zm[j] = z[j];
    }
    Ok((0..d).map(|i| (b[i] - div[i]).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_key, CounterRng, Purpose};

    const ONE: HFunction = HFunction::Constant { value: 1.0 };

    fn rand_z(rng: &mut CounterRng, d: usize, scale: f64) -> Vec<f64> {
        (0..d).map(|_| scale * rng.normal()).collect()
    }

    #[test]
    fn a_examples() {
        let a = eval_a(&[1.0, 0.0], &ONE).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        let a = eval_a(&[1.0, 2.0, 3.0], &ONE).unwrap();
        let want = [13.0, -2.0, -3.0, -2.0, 10.0, -6.0, -3.0, -6.0, 5.0];
        assert_eq!(a, DMatrix::from_row_slice(3, 3, &want));
        for h in HFunction::registry() {
            assert_eq!(eval_a(&[0.0; 3], &h).unwrap(), DMatrix::zeros(3, 3));
        }
    }

    #[test]
    fn b_examples() {
        assert_eq!(
            eval_b(&[1.0, 2.0, 3.0], &ONE).unwrap().as_slice(),
            &[-2.0, -4.0, -6.0]
        );
        assert_eq!(eval_b(&[1.0, 0.0], &ONE).unwrap().as_slice(), &[-1.0, 0.0]);
        assert_eq!(eval_b(&[0.0, 0.0], &ONE).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn sigma_examples() {
        let s = eval_sigma(&[1.0, 2.0], &ONE).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, -1.0, 0.0]));
        assert_eq!(
            &s * s.transpose(),
            DMatrix::from_row_slice(2, 2, &[4.0, -2.0, -2.0, 1.0])
        );
        let s = eval_sigma(&[1.0, 0.0, 0.0], &ONE).unwrap();
        let want = [0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(s, DMatrix::from_row_slice(3, 3, &want));
        assert_eq!(
            &s * s.transpose(),
            DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 1.0, 1.0]))
        );
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(
            eval_sigma(&[1.0; 4], &ONE),
            Err(Error::UnsupportedDimension(4))
        ));
        assert!(matches!(eval_a(&[1.0], &ONE), Err(Error::UnsupportedDimension(1))));
        // a and b are defined for any d >= 2
        assert!(eval_a(&[1.0; 4], &ONE).is_ok());
        assert!(eval_b(&[1.0; 5], &ONE).is_ok());
    }

    #[test]
    fn factorization_and_symmetries_random() {
        let mut rng = CounterRng::new(derive_key(1, Purpose::Synthetic, &[]));
        for h in HFunction::registry() {
            for d in [2, 3] {
                for _ in 0..500 {
                    let z = rand_z(&mut rng, d, 2.0);
                    let e = CoefficientEval::at(&z, &h).unwrap();
                    let r2: f64 = z.iter().map(|x| x * x).sum();
                    assert!(e.factorization_residual() <= 1e-12 * (1.0 + r2).powi(2));
                    let nz: Vec<f64> = z.iter().map(|x| -x).collect();
                    let en = CoefficientEval::at(&nz, &h).unwrap();
                    assert_eq!(en.a, e.a);
                    assert_eq!(en.b, -&e.b);
                    assert_eq!(en.sigma, -&e.sigma);
                    let az = &e.a * &e.z;
                    assert!(az.amax() <= 1e-13 * h.upper() * r2.powf(1.5).max(1e-300));
                }
            }
        }
    }

    #[test]
    fn d2_spectrum_is_zero_and_h_r2() {
        let mut rng = CounterRng::new(derive_key(2, Purpose::Synthetic, &[]));
        for h in HFunction::registry() {
            for _ in 0..200 {
                let z = rand_z(&mut rng, 2, 1.5);
                let r2 = z[0] * z[0] + z[1] * z[1];
                let a = eval_a(&z, &h).unwrap();
                let (vals, _) = crate::linalg::sym_eigen(a.transpose().as_slice(), 2);
                assert!(vals[0].abs() <= 1e-12 * (1.0 + r2));
                assert!((vals[1] - h.value(r2) * r2).abs() <= 1e-12 * (1.0 + r2));
            }
        }
    }

    #[test]
    fn divergence_identity() {
        assert!(check_divergence_identity(&[1.0, 2.0], &ONE, 1e-4).unwrap() <= 1e-6);
        assert!(check_divergence_identity(&[0.0, 0.0], &ONE, 1e-4).unwrap() <= 1e-12);
        let mut rng = CounterRng::new(derive_key(3, Purpose::Synthetic, &[]));
        for h in HFunction::registry() {
            for _ in 0..100 {
                let mut z = rand_z(&mut rng, 3, 1.0);
                let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
                z.iter_mut().for_each(|x| *x /= n);
                assert!(check_divergence_identity(&z, &h, 1e-4).unwrap() <= 1e-6);
            }
        }
        assert!(check_divergence_identity(&[1.0, 2.0], &ONE, 0.0).is_err());
    }

    #[test]
    fn h_bounds_dense_sampling() {
        for h in HFunction::registry() {
            for k in 0..=10_000 {
                let r = k as f64 * 1e-2;
                let v = h.value(r);
                assert!(h.lower() <= v && v <= h.upper());
            }
            // analytic limit r -> infinity is the floor m
            assert!((h.value(1e12) - h.lower()).abs() < 1e-9);
            // derivative consistent with finite differences
            let r = 0.7;
            let fd = (h.value(r + 1e-6) - h.value(r - 1e-6)) / 2e-6;
            assert!((fd - h.derivative(r)).abs() < 1e-8);
        }
        assert!(HFunction::ExponentialFloor { lower: 2.0, upper: 1.0 }.validate().is_err());
        assert!(HFunction::Constant { value: 0.0 }.validate().is_err());
    }

    #[test]
    fn fixed_matches_slice_api() {
        let h = HFunction::RationalFloor { lower: 0.5, upper: 2.0 };
        let z = [0.3, -1.2, 0.7];
        let a = a_fixed(&z, &h);
        let s = sigma_fixed(&z, &h);
        let xi = [0.4, -1.1, 2.0];
        let applied = sigma_unit_apply(&z, &xi);
        let sq = h.value(norm_sq(&z)).sqrt();
        let ea = eval_a(&z, &h).unwrap();
        for i in 0..3 {
            let manual: f64 = (0..3).map(|j| s[i][j] * xi[j]).sum();
            assert!((manual - sq * applied[i]).abs() < 1e-14);
            for j in 0..3 {
                assert_eq!(a[i][j], ea[(i, j)]);
            }
        }
    }
}
