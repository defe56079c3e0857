//! The weak form of the Landau equation evaluated on empirical measures, and
//! moment balance along simulated trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{a_fixed, b_fixed, HFunction};
use crate::simulator::{Population, Trajectory};
use crate::stats::{mean, std_error};

/// Partner sets larger than this are subsampled.
pub const MAX_FULL_PARTNERS: usize = 4096;
pub const SUBSAMPLE_PARTNERS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// Test functions with closed-form gradient and Hessian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    /// `v_i`.
    Coordinate { index: usize },
    /// `|v|^2`.
    Energy,
    /// `v_i v_j`.
    Quadratic { i: usize, j: usize },
    /// Sum of monomials of total degree at most 4.
    Polynomial { terms: Vec<Monomial> },
    /// `phi(Q v)` for a `d x d` matrix `Q` (row-major).
    Transformed { inner: Box<TestFunction>, q: Vec<f64> },
}

fn pow_derivative(x: f64, p: u32, order: u32) -> f64 {
    match (p, order) {
        (_, 0) => x.powi(p as i32),
        (0, _) => 0.0,
        (p, 1) => p as f64 * x.powi(p as i32 - 1),
        (1, 2) => 0.0,
        (p, 2) => (p * (p - 1)) as f64 * x.powi(p as i32 - 2),
        _ => unreachable!(),
    }
}

impl TestFunction {
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Self::Coordinate { index } if *index >= d => {
                Err(Error::invalid("phi.index", "must be below d"))
            }
            Self::Quadratic { i, j } if *i >= d || *j >= d => {
                Err(Error::invalid("phi.i/j", "must be below d"))
            }
            Self::Polynomial { terms } => {
                for m in terms {
                    if m.powers.len() != d {
                        return Err(Error::invalid("phi.terms.powers", "must have d entries"));
                    }
                    if m.powers.iter().sum::<u32>() > 4 {
                        return Err(Error::invalid("phi.terms.powers", "total degree must be at most 4"));
                    }
                }
                Ok(())
            }
            Self::Transformed { inner, q } => {
                if q.len() != d * d {
                    return Err(Error::invalid("phi.q", "must be a d x d matrix"));
                }
                inner.validate(d)
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        match self {
            Self::Coordinate { index } => v[*index],
            Self::Energy => v.iter().map(|x| x * x).sum(),
            Self::Quadratic { i, j } => v[*i] * v[*j],
            Self::Polynomial { terms } => terms
                .iter()
                .map(|m| m.coef * v.iter().zip(&m.powers).map(|(x, &p)| x.powi(p as i32)).product::<f64>())
                .sum(),
            Self::Transformed { inner, q } => inner.value(&apply(q, v)),
        }
    }

    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        match self {
            Self::Coordinate { index } => (0..d).map(|k| if k == *index { 1.0 } else { 0.0 }).collect(),
            Self::Energy => v.iter().map(|x| 2.0 * x).collect(),
            Self::Quadratic { i, j } => {
                let mut g = vec![0.0; d];
                g[*i] += v[*j];
                g[*j] += v[*i];
                g
            }
            Self::Polynomial { terms } => (0..d)
                .map(|k| {
                    terms
                        .iter()
                        .map(|m| {
                            m.coef
                                * (0..d)
                                    .map(|l| pow_derivative(v[l], m.powers[l], (l == k) as u32))
                                    .product::<f64>()
                        })
                        .sum()
                })
                .collect(),
            Self::Transformed { inner, q } => {
                let g = inner.gradient(&apply(q, v));
                (0..d).map(|c| (0..d).map(|r| q[r * d + c] * g[r]).sum()).collect()
            }
        }
    }

    /// Row-major `d x d`.
    pub fn hessian(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        match self {
            Self::Coordinate { .. } => vec![0.0; d * d],
            Self::Energy => (0..d * d).map(|k| if k % (d + 1) == 0 { 2.0 } else { 0.0 }).collect(),
            Self::Quadratic { i, j } => {
                let mut h = vec![0.0; d * d];
                h[i * d + j] += 1.0;
                h[j * d + i] += 1.0;
                h
            }
            Self::Polynomial { terms } => {
                let mut h = vec![0.0; d * d];
                for r in 0..d {
                    for c in 0..d {
                        h[r * d + c] = terms
                            .iter()
                            .map(|m| {
                                m.coef
                                    * (0..d)
                                        .map(|l| {
                                            let order = (l == r) as u32 + (l == c) as u32;
                                            pow_derivative(v[l], m.powers[l], order)
                                        })
                                        .product::<f64>()
                            })
                            .sum();
                    }
                }
                h
            }
            Self::Transformed { inner, q } => {
                let hi = inner.hessian(&apply(q, v));
                let mut h = vec![0.0; d * d];
                for r in 0..d {
                    for c in 0..d {
                        let mut s = 0.0;
                        for a in 0..d {
                            for b in 0..d {
                                s += q[a * d + r] * hi[a * d + b] * q[b * d + c];
                            }
                        }
                        h[r * d + c] = s;
                    }
                }
                h
            }
        }
    }
}

fn apply(q: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|r| (0..d).map(|c| q[r * d + c] * v[c]).sum()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakformRhs {
    pub value: f64,
    /// `(1/n^2) sum |summand|`: the size of the terms that cancel.
    pub scale: f64,
    /// Particles entering the double sum.
    pub partners: usize,
    /// `(1/2n) sum_p bbar_p' D^2 phi(X_p) bbar_p` with `bbar_p` the mean drift
    /// on particle `p`. An explicit step of size `delta` changes the moment by
    /// `delta * (value + delta * curvature)` in expectation, exactly when phi
    /// has degree at most 2.
    pub curvature: f64,
}

/// Symmetric stratified subset used for both indices of the double sum.
pub fn partner_indices(p: usize) -> Vec<usize> {
    if p <= MAX_FULL_PARTNERS {
        (0..p).collect()
    } else {
        (0..SUBSAMPLE_PARTNERS).map(|k| k * p / SUBSAMPLE_PARTNERS).collect()
    }
}

fn rhs_fixed<const D: usize>(pop: &Population, phi: &TestFunction, h: &HFunction) -> WeakformRhs {
    let idx = partner_indices(pop.len());
    let pts: Vec<[f64; D]> = idx
        .iter()
        .map(|&i| {
            let mut x = [0.0; D];
            x.copy_from_slice(pop.particle(i));
            x
        })
        .collect();
    let n = pts.len() as f64;
    let rows: Vec<(f64, f64, f64)> = pts
        .par_iter()
        .map(|xp| {
            let g = phi.gradient(xp);
            let hs = phi.hessian(xp);
            let mut s = 0.0;
            let mut abs = 0.0;
            let mut bbar = [0.0; D];
            for xq in &pts {
                let mut z = [0.0; D];
                for k in 0..D {
                    z[k] = xp[k] - xq[k];
                }
                let a = a_fixed(&z, h);
                let b = b_fixed(&z, h);
                let mut term = 0.0;
                for r in 0..D {
                    bbar[r] += b[r] / n;
                    term += b[r] * g[r];
                    for c in 0..D {
                        term += 0.5 * a[r][c] * hs[r * D + c];
                    }
                }
                s += term;
                abs += term.abs();
            }
            let mut curv = 0.0;
            for r in 0..D {
                for c in 0..D {
                    curv += 0.5 * bbar[r] * hs[r * D + c] * bbar[c];
                }
            }
            (s, abs, curv)
        })
        .collect();
    let (s, abs, curv) = rows
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, r| (acc.0 + r.0, acc.1 + r.1, acc.2 + r.2));
    WeakformRhs {
        value: s / (n * n),
        scale: abs / (n * n),
        partners: pts.len(),
        curvature: curv / n,
    }
}

/// `(1/P^2) sum_{p,q} [ 1/2 sum_ij a_ij(X_p - X_q) d_ij phi(X_p)
/// + sum_i b_i(X_p - X_q) d_i phi(X_p) ]`.
pub fn weakform_rhs(pop: &Population, phi: &TestFunction, h: &HFunction) -> Result<WeakformRhs> {
    if pop.len() < 2 {
        return Err(Error::invalid("particles", "must be at least 2"));
    }
    phi.validate(pop.d)?;
    Ok(match pop.d {
        2 => rhs_fixed::<2>(pop, phi, h),
        3 => rhs_fixed::<3>(pop, phi, h),
        d => return Err(Error::UnsupportedDimension(d)),
    })
}

pub fn empirical_moment(pop: &Population, phi: &TestFunction) -> f64 {
    pop.positions.chunks_exact(pop.d).map(|v| phi.value(v)).sum::<f64>() / pop.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub t: f64,
    pub moment: f64,
    pub lhs_derivative: f64,
    pub rhs: f64,
    pub residual: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBalanceReport {
    pub phi: TestFunction,
    pub window: (f64, f64),
    pub replicas: usize,
    pub rows: Vec<BalanceRow>,
    /// Replica mean of `m(t_end) - m(t_start) - int rhs dt` (trapezoid rule).
    pub integrated_residual: f64,
    pub integrated_se: f64,
    /// Size of the moment change, for judging exact zeros.
    pub scale: f64,
    pub passed: bool,
}

impl MomentBalanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,moment,lhs_derivative,rhs,residual,se\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.t, r.moment, r.lhs_derivative, r.rhs, r.residual, r.se));
        }
        s
    }
}

/// Compares the finite-difference time derivative of `(1/P) sum phi(X_p)`
/// with the weak-form right-hand side on the recorded snapshots of each
/// replica inside `window`. The right-hand side includes the `O(delta)`
/// curvature term of the explicit step, so for quadratic test functions it
/// is the scheme's exact expected rate. Passes when the integrated residual
/// is within three replica standard errors of zero.
pub fn moment_balance_check(
    trajectories: &[Trajectory],
    phi: &TestFunction,
    window: (f64, f64),
) -> Result<MomentBalanceReport> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::invalid("trajectories", "at least one replica is required"))?;
    let h = first.spec.h;
    let delta = first.spec.delta;
    let inside = |t: f64| t >= window.0 - 1e-12 && t <= window.1 + 1e-12;
    let times: Vec<f64> = first.snapshots.iter().map(|p| p.t).filter(|t| inside(*t)).collect();
    if times.len() < 3 {
        return Err(Error::invalid("window", "window must span at least 2 recording intervals"));
    }
    if times.len() < 5 {
        return Err(Error::invalid("window", "at least 5 recorded times are required in the window"));
    }
    let per: Vec<(Vec<f64>, Vec<f64>)> = trajectories
        .iter()
        .map(|tr| {
            let snaps: Vec<&Population> = tr.snapshots.iter().filter(|p| inside(p.t)).collect();
            if snaps.len() != times.len() {
                return Err(Error::invalid("trajectories", "replicas must share recording times"));
            }
            let m = snaps.iter().map(|p| empirical_moment(p, phi)).collect();
            let r = snaps
                .iter()
                .map(|p| weakform_rhs(p, phi, &h).map(|w| w.value + delta * w.curvature))
                .collect::<Result<_>>()?;
            Ok((m, r))
        })
        .collect::<Result<_>>()?;
    let n = times.len();
    let deriv = |m: &[f64], k: usize| {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        (m[b] - m[a]) / (times[b] - times[a])
    };
    let rows = (0..n)
        .map(|k| {
            let res: Vec<f64> = per.iter().map(|(m, r)| deriv(m, k) - r[k]).collect();
            BalanceRow {
                t: times[k],
                moment: mean(&per.iter().map(|(m, _)| m[k]).collect::<Vec<_>>()),
                lhs_derivative: mean(&per.iter().map(|(m, _)| deriv(m, k)).collect::<Vec<_>>()),
                rhs: mean(&per.iter().map(|(_, r)| r[k]).collect::<Vec<_>>()),
                residual: mean(&res),
                se: std_error(&res),
            }
        })
        .collect();
    let integrated: Vec<f64> = per
        .iter()
        .map(|(m, r)| {
            let area: f64 = (1..n).map(|k| 0.5 * (r[k] + r[k - 1]) * (times[k] - times[k - 1])).sum();
            m[n - 1] - m[0] - area
        })
        .collect();
    let scale = per
        .iter()
        .map(|(m, _)| m.iter().map(|v| v.abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let integrated_residual = mean(&integrated);
    let integrated_se = std_error(&integrated);
    Ok(MomentBalanceReport {
        phi: phi.clone(),
        window,
        replicas: trajectories.len(),
        rows,
        integrated_residual,
        integrated_se,
        scale,
        passed: integrated_residual.abs() <= 3.0 * integrated_se + 1e-12 * (1.0 + scale),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{init_population, ModelSpec};

    #[test]
    fn hand_value_for_v1_squared() {
        let pop = Population::from_points(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
        let h = HFunction::default();
        let phi = TestFunction::Quadratic { i: 0, j: 0 };
        // ordered pairs (p, q): (0,1): z = (1,-1), a11 = 1, b1 = -1, v1 = 1
        //                       (1,0): z = (-1,1), a11 = 1, b1 = 1,  v1 = 0
        let want = 0.25 * ((1.0 + 2.0 * 1.0 * -1.0) + (1.0 + 0.0));
        let got = weakform_rhs(&pop, &phi, &h).unwrap().value;
        assert!((got - want).abs() < 1e-15, "{got}");
    }

    #[test]
    fn polynomial_derivatives_match_closed_forms() {
        let v = [0.7, -1.3];
        let poly = TestFunction::Polynomial {
            terms: vec![Monomial { coef: 1.0, powers: vec![2, 0] }, Monomial { coef: 1.0, powers: vec![0, 2] }],
        };
        assert!((poly.value(&v) - TestFunction::Energy.value(&v)).abs() < 1e-15);
        assert_eq!(poly.gradient(&v), TestFunction::Energy.gradient(&v));
        assert_eq!(poly.hessian(&v), TestFunction::Energy.hessian(&v));
        let cross = TestFunction::Polynomial { terms: vec![Monomial { coef: 1.0, powers: vec![1, 1] }] };
        let q = TestFunction::Quadratic { i: 0, j: 1 };
        assert_eq!(cross.gradient(&v), q.gradient(&v));
        assert_eq!(cross.hessian(&v), q.hessian(&v));
        let bad = TestFunction::Polynomial { terms: vec![Monomial { coef: 1.0, powers: vec![3, 2] }] };
        assert!(bad.validate(2).is_err());
    }

    #[test]
    fn curvature_matches_a_drift_only_step() {
        use crate::engine::StepControls;
        use crate::simulator::{particle_coefficients, step};
        for h in HFunction::registry() {
            let mut spec = ModelSpec::maxwellian(2, 40, 0.05, 0.05, 4);
            spec.h = h;
            let pop = init_population(&spec, None).unwrap();
            let controls = StepControls { drift: true, noise: false };
            let next = step(&pop, &spec, controls).unwrap().0;
            for phi in [TestFunction::Energy, TestFunction::Quadratic { i: 0, j: 1 }] {
                let w = weakform_rhs(&pop, &phi, &h).unwrap();
                let first: f64 = (0..pop.len())
                    .map(|i| {
                        let b = particle_coefficients(&pop, i, &h).b_mean;
                        let g = phi.gradient(pop.particle(i));
                        b.iter().zip(&g).map(|(b, g)| b * g).sum::<f64>()
                    })
                    .sum::<f64>()
                    / pop.len() as f64;
                let want = spec.delta * first + spec.delta * spec.delta * w.curvature;
                let got = empirical_moment(&next, &phi) - empirical_moment(&pop, &phi);
                assert!((got - want).abs() < 1e-13, "{phi:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn conserved_quantities_vanish() {
        for h in HFunction::registry() {
            let spec = ModelSpec::maxwellian(3, 10, 0.1, 0.1, 9);
            let pop = init_population(&spec, None).unwrap();
            for phi in [TestFunction::Coordinate { index: 2 }, TestFunction::Energy] {
                let w = weakform_rhs(&pop, &phi, &h).unwrap();
                assert!(w.value.abs() <= 1e-12 * w.scale, "{phi:?} {w:?}");
            }
        }
    }

    #[test]
    fn large_populations_are_subsampled_symmetrically() {
        let idx = partner_indices(5000);
        assert_eq!(idx.len(), SUBSAMPLE_PARTNERS);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(partner_indices(100).len(), 100);
    }
}
