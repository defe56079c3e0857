//! Small descriptive statistics and regression helpers.

use serde::{Deserialize, Serialize};

use crate::rng::{derive_key, CounterRng, Purpose};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    weighted_ols(x, y, &vec![1.0; x.len()])
}

/// Weighted least squares `y = intercept + slope x`; returns `(slope, intercept)`.
pub fn weighted_ols(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for ((a, b), w) in x.iter().zip(y).zip(w) {
        sxy += w * (a - mx) * (b - my);
        sxx += w * (a - mx) * (a - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Linear-interpolated quantile of `sorted` (ascending), `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

/// A log-log slope with a percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

/// Fits `ln(mean(groups[g])) = intercept + slope ln(x[g])` and bootstraps
/// the slope by resampling each group independently.
pub fn bootstrap_loglog_slope(
    x: &[f64],
    groups: &[Vec<f64>],
    resamples: usize,
    level: f64,
    seed: u64,
) -> SlopeFit {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = groups.iter().map(|g| mean(g).ln()).collect();
    let (slope, intercept) = ols(&lx, &ly);
    let mut slopes: Vec<f64> = (0..resamples)
        .map(|b| {
            let mut rng = CounterRng::new(derive_key(seed, Purpose::Bootstrap, &[b as u64]));
            let ly: Vec<f64> = groups
                .iter()
                .map(|g| {
                    let s: f64 = (0..g.len()).map(|_| g[rng.index(g.len())]).sum();
                    (s / g.len() as f64).ln()
                })
                .collect();
            ols(&lx, &ly).0
        })
        .collect();
    slopes.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    SlopeFit {
        slope,
        intercept,
        ci_low: quantile_sorted(&slopes, tail),
        ci_high: quantile_sorted(&slopes, 1.0 - tail),
        level,
    }
}
