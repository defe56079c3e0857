//! Gaussian-type envelopes for the conditional density, the logarithmic tail
//! bound and the martingale behind it.
//!
//! The constants of the envelopes are not computable, so they are fitted on
//! one half of the data and the functional form is tested on the other half.

use serde::{Deserialize, Serialize};

use crate::density::DensityField;
use crate::error::{Error, Result};
use crate::kernels::sigma_growth_sq;
use crate::simulator::Trajectory;
use crate::stats::{ols, quantile_sorted, weighted_ols};

/// Significance, in standard errors, for violations and positivity.
pub const SIGNIFICANCE: f64 = 3.0;
/// Fewer significant test points than this makes a sandwich check inconclusive.
pub const MIN_TEST_POINTS: usize = 30;
/// Largest tolerated fraction of significant violations.
pub const MAX_VIOLATION_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub c1_low: f64,
    pub c2_low: f64,
    pub c1_up: f64,
    pub c2_up: f64,
    pub c3_up: f64,
    pub lambda1_hat: f64,
    pub lambda2_hat: f64,
    /// Smallest and largest `|v - x0|` among the fit points.
    pub fit_window: (f64, f64),
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("t", "time must be positive"))
    }
}

fn dist_sq(v: &[f64], x0: &[f64]) -> f64 {
    v.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// `c1 t^{-d/2} exp(-c2 |v - x0|^2 / t)`.
pub fn lower_envelope(t: f64, v: &[f64], x0: &[f64], p: &EnvelopeParams) -> Result<f64> {
    check_time(t)?;
    let d = v.len() as f64;
    Ok(p.c1_low * t.powf(-d / 2.0) * (-p.c2_low * dist_sq(v, x0) / t).exp())
}

/// `c3 t^{-d/2} exp(-(ln(1+|v|^2) - ln(1+|x0|^2) - c1 t)^2 / (c2 t))`.
pub fn upper_envelope(t: f64, v: &[f64], x0: &[f64], p: &EnvelopeParams) -> Result<f64> {
    check_time(t)?;
    let d = v.len() as f64;
    let e = log_ratio(v, x0) - p.c1_up * t;
    Ok(p.c3_up * t.powf(-d / 2.0) * (-e * e / (p.c2_up * t)).exp())
}

fn log_ratio(v: &[f64], x0: &[f64]) -> f64 {
    (1.0 + norm_sq(v)).ln() - (1.0 + norm_sq(x0)).ln()
}

/// `P(|X_t| >= r) <= exp(-(ln(1+r^2) - ln(1+|x0|^2) - c1 t)^2 / (c2 t))`,
/// or 1 where the exponent's base is not positive.
pub fn tail_bound(t: f64, r: f64, x0: &[f64], c1: f64, c2: f64) -> f64 {
    let e = (1.0 + r * r).ln() - (1.0 + norm_sq(x0)).ln() - c1 * t;
    if e <= 0.0 {
        return 1.0;
    }
    (-e * e / (c2 * t)).exp().clamp(0.0, 1.0)
}

/// One significant grid value used in a fit or a test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub t: f64,
    pub v: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
}

/// Splits the significant values of `fields` by grid index parity:
/// even indices go to the fit half, odd to the test half.
pub fn split_points(fields: &[DensityField]) -> (Vec<DensityPoint>, Vec<DensityPoint>) {
    let mut fit = Vec::new();
    let mut test = Vec::new();
    for f in fields {
        for (g, ((v, &value), &stderr)) in f.grid.iter().zip(&f.values).zip(&f.stderr).enumerate() {
            if value.abs() <= SIGNIFICANCE * stderr {
                continue;
            }
            let p = DensityPoint {
                t: f.t,
                v: v.clone(),
                value,
                stderr,
            };
            if g % 2 == 0 {
                fit.push(p);
            } else {
                test.push(p);
            }
        }
    }
    (fit, test)
}

/// Weighted least squares in log space (weights `value^2 / stderr^2`, the
/// inverse variance of `ln value`), then the level constants are moved just
/// far enough that each envelope bounds every fit point.
pub fn fit_envelopes(fit: &[DensityPoint], x0: &[f64]) -> Result<EnvelopeParams> {
    if fit.len() < 3 {
        return Err(Error::invalid("fit", "at least 3 significant fit points are required"));
    }
    let d = x0.len() as f64;
    let y: Vec<f64> = fit.iter().map(|p| p.value.ln() + d / 2.0 * p.t.ln()).collect();
    let w: Vec<f64> = fit.iter().map(|p| (p.value / p.stderr).powi(2)).collect();

    let s: Vec<f64> = fit.iter().map(|p| dist_sq(&p.v, x0) / p.t).collect();
    let (slope, _) = weighted_ols(&s, &y, &w);
    let c2_low = (-slope).max(1e-6);
    let ln_c1 = y.iter().zip(&s).map(|(y, s)| y + c2_low * s).fold(f64::INFINITY, f64::min);

    let lr: Vec<f64> = fit.iter().map(|p| log_ratio(&p.v, x0)).collect();
    let c1_max = lr.iter().zip(fit).map(|(l, p)| l / p.t).fold(0.0, f64::max);
    let mut best: Option<(f64, f64, f64)> = None;
    for k in 0..=200 {
        let c1 = c1_max * k as f64 / 200.0;
        let q: Vec<f64> = lr.iter().zip(fit).map(|(l, p)| (l - c1 * p.t).powi(2) / p.t).collect();
        let (slope, icpt) = weighted_ols(&q, &y, &w);
        if slope >= 0.0 {
            continue;
        }
        let sse: f64 = q
            .iter()
            .zip(&y)
            .zip(&w)
            .map(|((q, y), w)| w * (y - icpt - slope * q).powi(2))
            .sum();
        if best.is_none_or(|b| sse < b.2) {
            best = Some((c1, -1.0 / slope, sse));
        }
    }
    let (c1_up, c2_up) = match best {
        Some((c1, c2, _)) => (c1, c2),
        None => (0.0, 1e6),
    };
    let ln_c3 = y
        .iter()
        .zip(&lr)
        .zip(fit)
        .map(|((y, l), p)| y + (l - c1_up * p.t).powi(2) / (c2_up * p.t))
        .fold(f64::NEG_INFINITY, f64::max);

    let radii: Vec<f64> = fit.iter().map(|p| dist_sq(&p.v, x0).sqrt()).collect();
    Ok(EnvelopeParams {
        c1_low: ln_c1.exp(),
        c2_low,
        c1_up,
        c2_up,
        c3_up: ln_c3.exp(),
        lambda1_hat: f64::NAN,
        lambda2_hat: f64::NAN,
        fit_window: (
            radii.iter().copied().fold(f64::INFINITY, f64::min),
            radii.iter().copied().fold(0.0, f64::max),
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichPoint {
    pub t: f64,
    pub v: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
    pub lower: f64,
    pub upper: f64,
    pub below_lower: bool,
    pub above_upper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub params: EnvelopeParams,
    pub fit_points: usize,
    pub test_points: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
    pub violation_fraction: f64,
    /// Every significant value is positive and at least one is.
    pub positivity: bool,
    pub status: CheckStatus,
    pub points: Vec<SandwichPoint>,
}

/// Tests `lower <= KDE <= upper` on the test half. A point violates a side
/// only when it misses it by more than `SIGNIFICANCE` standard errors.
pub fn verify_sandwich(fields: &[DensityField], x0: &[f64]) -> Result<SandwichReport> {
    let (fit, test) = split_points(fields);
    let significant: Vec<f64> = fields
        .iter()
        .flat_map(|f| {
            f.values
                .iter()
                .zip(&f.stderr)
                .filter(|(v, e)| v.abs() > SIGNIFICANCE * **e)
                .map(|(v, _)| *v)
        })
        .collect();
    let positivity = !significant.is_empty() && significant.iter().all(|v| *v > 0.0);
    let params = match fit_envelopes(&fit, x0) {
        Ok(p) => p,
        Err(_) => {
            return Ok(SandwichReport {
                params: EnvelopeParams {
                    c1_low: f64::NAN,
                    c2_low: f64::NAN,
                    c1_up: f64::NAN,
                    c2_up: f64::NAN,
                    c3_up: f64::NAN,
                    lambda1_hat: f64::NAN,
                    lambda2_hat: f64::NAN,
                    fit_window: (f64::NAN, f64::NAN),
                },
                fit_points: fit.len(),
                test_points: test.len(),
                lower_violations: 0,
                upper_violations: 0,
                violation_fraction: 0.0,
                positivity,
                status: CheckStatus::Inconclusive,
                points: Vec::new(),
            })
        }
    };
    let points: Vec<SandwichPoint> = test
        .iter()
        .map(|p| {
            let lower = lower_envelope(p.t, &p.v, x0, &params)?;
            let upper = upper_envelope(p.t, &p.v, x0, &params)?;
            Ok(SandwichPoint {
                t: p.t,
                v: p.v.clone(),
                value: p.value,
                stderr: p.stderr,
                lower,
                upper,
                below_lower: p.value + SIGNIFICANCE * p.stderr < lower,
                above_upper: p.value - SIGNIFICANCE * p.stderr > upper,
            })
        })
        .collect::<Result<_>>()?;
    let lower_violations = points.iter().filter(|p| p.below_lower).count();
    let upper_violations = points.iter().filter(|p| p.above_upper).count();
    let bad = points.iter().filter(|p| p.below_lower || p.above_upper).count();
    let violation_fraction = if points.is_empty() {
        0.0
    } else {
        bad as f64 / points.len() as f64
    };
    let status = if points.len() < MIN_TEST_POINTS {
        CheckStatus::Inconclusive
    } else if violation_fraction <= MAX_VIOLATION_FRACTION && positivity {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(SandwichReport {
        params,
        fit_points: fit.len(),
        test_points: points.len(),
        lower_violations,
        upper_violations,
        violation_fraction,
        positivity,
        status,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub t: f64,
    pub n_samples: usize,
    pub radii: Vec<f64>,
    pub empirical_tail: Vec<f64>,
    pub stderr: Vec<f64>,
    pub envelope: Vec<f64>,
    /// Radii with even index were used for the fit.
    pub fit: Vec<bool>,
    pub c1: f64,
    pub c2: f64,
    /// Non-vacuous test radii.
    pub tested: usize,
    pub violations: usize,
    pub status: CheckStatus,
}

impl TailReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,empirical_tail,stderr,bound,split\n");
        for k in 0..self.radii.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.radii[k],
                self.empirical_tail[k],
                self.stderr[k],
                self.envelope[k],
                if self.fit[k] { "fit" } else { "test" }
            ));
        }
        s
    }
}

/// Radii at the empirical quantiles `levels` of `|X_t|`.
pub fn quantile_radii(samples: &[Vec<f64>], levels: &[f64]) -> Vec<f64> {
    let mut norms: Vec<f64> = samples.iter().map(|s| norm_sq(s).sqrt()).collect();
    norms.sort_by(f64::total_cmp);
    let mut r: Vec<f64> = levels.iter().map(|&q| quantile_sorted(&norms, q)).collect();
    r.dedup();
    r
}

/// `n` quantile levels from 0.5 to 0.999, evenly spaced in `ln(1 - q)`.
pub fn default_tail_levels(n: usize) -> Vec<f64> {
    let (a, b) = (0.5f64.ln(), 0.001f64.ln());
    (0..n)
        .map(|k| 1.0 - (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Tightest `(c1, c2)` with `tail_bound >= p` at every fit point.
///
/// With `u = sqrt(-ln p)` and `L = ln(1+r^2) - ln(1+|x0|^2)`, the bound holds
/// iff `L <= alpha + beta u` where `alpha = c1 t >= 0` and
/// `beta = sqrt(c2 t)`. Among dominating lines the one with least total
/// slack is kept; it passes through a vertex of the upper hull.
pub fn fit_tail_constants(t: f64, radii: &[f64], tail: &[f64], x0: &[f64]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = radii
        .iter()
        .zip(tail)
        .filter(|(_, p)| **p > 0.0 && **p < 1.0)
        .map(|(r, p)| ((-p.ln()).sqrt(), (1.0 + r * r).ln() - (1.0 + norm_sq(x0)).ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::invalid("radii", "at least 2 fit radii with 0 < tail < 1 are required"));
    }
    let feasible = |a: f64, b: f64| a >= 0.0 && b > 0.0 && pts.iter().all(|&(u, l)| a + b * u >= l - 1e-12 * (1.0 + l.abs()));
    let slack = |a: f64, b: f64| pts.iter().map(|&(u, l)| a + b * u - l).sum::<f64>();
    let mut candidates = vec![(0.0, pts.iter().map(|&(u, l)| l / u).fold(f64::MIN_POSITIVE, f64::max))];
    for (i, &(u1, l1)) in pts.iter().enumerate() {
        for &(u2, l2) in &pts[i + 1..] {
            if (u2 - u1).abs() > 1e-12 {
                let b = (l2 - l1) / (u2 - u1);
                candidates.push((l1 - b * u1, b));
            }
        }
    }
    let (a, b) = candidates
        .into_iter()
        .filter(|&(a, b)| feasible(a, b))
        .min_by(|x, y| slack(x.0, x.1).total_cmp(&slack(y.0, y.1)))
        .expect("the line through the origin is feasible");
    Ok((a / t, b * b / t))
}

/// Fits the tail constants on even-indexed radii and tests the bound on the
/// odd-indexed ones.
pub fn tail_report(t: f64, samples: &[Vec<f64>], x0: &[f64], levels: &[f64]) -> Result<TailReport> {
    check_time(t)?;
    if samples.is_empty() {
        return Err(Error::invalid("samples", "must not be empty"));
    }
    let n = samples.len() as f64;
    let radii = quantile_radii(samples, levels);
    let norms: Vec<f64> = samples.iter().map(|s| norm_sq(s).sqrt()).collect();
    let empirical_tail: Vec<f64> = radii
        .iter()
        .map(|r| norms.iter().filter(|&&x| x >= *r).count() as f64 / n)
        .collect();
    let stderr: Vec<f64> = empirical_tail.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    let fit: Vec<bool> = (0..radii.len()).map(|k| k % 2 == 0).collect();
    let (fr, fp): (Vec<f64>, Vec<f64>) = radii
        .iter()
        .zip(&empirical_tail)
        .zip(&fit)
        .filter(|(_, f)| **f)
        .map(|((r, p), _)| (*r, *p))
        .unzip();
    let (c1, c2) = fit_tail_constants(t, &fr, &fp, x0)?;
    let envelope: Vec<f64> = radii.iter().map(|&r| tail_bound(t, r, x0, c1, c2)).collect();
    let mut tested = 0;
    let mut violations = 0;
    for k in (0..radii.len()).filter(|k| !fit[*k]) {
        if envelope[k] < 1.0 {
            tested += 1;
            if empirical_tail[k] - SIGNIFICANCE * stderr[k] > envelope[k] {
                violations += 1;
            }
        }
    }
    let status = if tested == 0 {
        CheckStatus::Inconclusive
    } else if violations as f64 <= MAX_VIOLATION_FRACTION * tested as f64 {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(TailReport {
        t,
        n_samples: samples.len(),
        radii,
        empirical_tail,
        stderr,
        envelope,
        fit,
        c1,
        c2,
        tested,
        violations,
        status,
    })
}

/// Quadratic variation of the martingale part of `ln(1 + |X_t|^2)` along a
/// tagged path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMartingaleReport {
    pub times: Vec<f64>,
    /// Realized `sum (Delta M)^2` up to each time.
    pub realized_qv: Vec<f64>,
    /// `int g^T A g dt` up to each time, `g = 2X / (1 + |X|^2)`.
    pub predicted_qv: Vec<f64>,
    pub slope: f64,
    pub bound: f64,
    /// Largest magnitudes of the three drift integrands of the Ito expansion.
    pub max_drift_integrands: [f64; 3],
    pub warnings: Vec<String>,
    pub passed: bool,
}

/// Rebuilds `Z = ln(1 + |X|^2)` from the per-step tagged records, removes
/// the Ito drift `g.B + tr(A)/(1+|X|^2) - 2 X^T A X / (1+|X|^2)^2` and
/// accumulates the squared martingale increments. The regression slope of the
/// realized quadratic variation against time is compared with
/// `4 C_sigma^2 d`.
pub fn verify_logmartingale(traj: &Trajectory) -> Result<LogMartingaleReport> {
    if traj.tagged.is_empty() {
        return Err(Error::invalid("trajectory", "needs tagged records at every step"));
    }
    let spec = &traj.spec;
    let d = spec.d;
    let delta = spec.delta;
    let mut warnings = Vec::new();
    if delta > 1e-2 {
        warnings.push(format!("mesh {delta} is coarser than 1e-2; quadratic variation is unreliable"));
    }
    let bound = 4.0 * sigma_growth_sq(d, &spec.h) * d as f64;
    let mut times = vec![traj.tagged[0].t];
    let mut realized = vec![0.0];
    let mut predicted = vec![0.0];
    let mut max_i = [0.0f64; 3];
    for rec in &traj.tagged {
        let x = &rec.x;
        let a = &rec.coefficients.a_mean;
        let b = &rec.coefficients.b_mean;
        let q = 1.0 + norm_sq(x);
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v / q).collect();
        let gb: f64 = g.iter().zip(b).map(|(g, b)| g * b).sum();
        let tr: f64 = (0..d).map(|r| a[r * d + r]).sum();
        let quad = |u: &[f64]| -> f64 {
            (0..d)
                .map(|r| (0..d).map(|c| u[r] * a[r * d + c] * u[c]).sum::<f64>())
                .sum()
        };
        let i1 = if traj.controls_drift { gb } else { 0.0 };
        let (i2, i3, rate) = if traj.controls_noise {
            (tr / q, -2.0 * quad(x) / (q * q), quad(&g))
        } else {
            (0.0, 0.0, 0.0)
        };
        for (m, v) in max_i.iter_mut().zip([i1, i2, i3]) {
            *m = m.max(v.abs());
        }
        let x1: Vec<f64> = x
            .iter()
            .zip(&rec.drift)
            .zip(&rec.noise)
            .map(|((x, a), b)| x + a + b)
            .collect();
        let dz = (1.0 + norm_sq(&x1)).ln() - q.ln();
        let dm = dz - (i1 + i2 + i3) * delta;
        realized.push(realized.last().unwrap() + dm * dm);
        predicted.push(predicted.last().unwrap() + rate * delta);
        times.push(rec.t + delta);
    }
    let (slope, _) = ols(&times, &realized);
    Ok(LogMartingaleReport {
        passed: slope <= bound,
        times,
        realized_qv: realized,
        predicted_qv: predicted,
        slope,
        bound,
        max_drift_integrands: max_i,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c1: f64, c2: f64, c3: f64) -> EnvelopeParams {
        EnvelopeParams {
            c1_low: c1,
            c2_low: c2,
            c1_up: c1,
            c2_up: c2,
            c3_up: c3,
            lambda1_hat: 0.0,
            lambda2_hat: 0.0,
            fit_window: (0.0, 0.0),
        }
    }

    #[test]
    fn envelope_plug_ins() {
        let p = params(1.0, 1.0, 1.0);
        let x0 = [0.0, 0.0];
        assert!((lower_envelope(1.0, &[1.0, 0.0], &x0, &p).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(lower_envelope(2.0, &x0, &x0, &p).unwrap(), 0.5);
        let q = params(0.0, 1.0, 1.0);
        let v = [(std::f64::consts::E - 1.0).sqrt(), 0.0];
        assert!((upper_envelope(1.0, &v, &x0, &q).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(upper_envelope(4.0, &[0.0, 3.0], &[3.0, 0.0], &q).unwrap(), 0.25);
        assert!(lower_envelope(0.0, &x0, &x0, &p).is_err());
        assert!(upper_envelope(-1.0, &x0, &x0, &p).is_err());
    }

    #[test]
    fn tail_bound_plug_ins() {
        assert_eq!(tail_bound(1.0, 2.0, &[2.0, 0.0], 0.0, 1.0), 1.0);
        let r = (std::f64::consts::E - 1.0).sqrt();
        assert!((tail_bound(1.0, r, &[0.0, 0.0], 0.0, 2.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(tail_bound(1.0, 1e8, &[0.0, 0.0], 0.5, 2.0) < 1e-100);
    }

    #[test]
    fn tail_fit_dominates_fit_points() {
        let radii = [1.0, 1.5, 2.0, 2.5, 3.0];
        let tail = [0.4, 0.2, 0.08, 0.02, 0.004];
        let x0 = [0.5, 0.0];
        let (c1, c2) = fit_tail_constants(1.0, &radii, &tail, &x0).unwrap();
        assert!(c1 >= 0.0 && c2 > 0.0);
        for (r, p) in radii.iter().zip(tail) {
            assert!(tail_bound(1.0, *r, &x0, c1, c2) >= p * (1.0 - 1e-9));
        }
    }

    #[test]
    fn quantile_levels_span() {
        let l = default_tail_levels(40);
        assert!((l[0] - 0.5).abs() < 1e-12 && (l[39] - 0.999).abs() < 1e-12);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
    }
}
