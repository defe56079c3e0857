//! One-step decomposition `X_k = X_{k-1} + J_k + Gamma_k`, the spectrum of the
//! conditional covariance of `J_k` and moment scalings of the increments.
//!
//! `J_k` is the Gaussian part obtained by freezing the diffusion coefficient
//! at the step start; the true path over the step is approximated by an inner
//! mesh of the shared-noise scheme, and `J_k` is accumulated against the same
//! inner Brownian increments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{pairwise_sums, to_fixed, to_flat, PairInteraction, StepControls};
use crate::error::{Error, Result};
use crate::kernels::{sigma_growth_sq, HFunction};
use crate::linalg::{lambda_max, lambda_min};
use crate::rng::{derive_key, Purpose};
use crate::simulator::{init_population, particle_coefficients, ModelSpec, Population, Trajectory};
use crate::stats::{bootstrap_loglog_slope, SlopeFit};

pub const DEFAULT_INNER_STEPS: usize = 50;
/// Coarsest inner mesh accepted, as a number of substeps per step.
pub const MIN_INNER_STEPS: usize = 10;
/// Slack of the algebraic lower spectrum bound.
pub const SPECTRUM_TOL: f64 = 1e-10;

/// Decomposition of every particle's increment over one step. All vectors are
/// row-major `P x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedStep {
    pub start: Population,
    pub end: Population,
    pub increment: Vec<f64>,
    /// Frozen-coefficient Gaussian part.
    pub j: Vec<f64>,
    /// `Delta * B_i` at the step start.
    pub frozen_drift: Vec<f64>,
    /// `increment - j - frozen_drift`.
    pub remainder: Vec<f64>,
}

/// The decomposition seen by one particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecomposition {
    pub k: usize,
    pub particle: usize,
    pub x_prev: Vec<f64>,
    pub increment: Vec<f64>,
    pub j: Vec<f64>,
    /// Everything but `j`: `remainder + frozen_drift`.
    pub gamma: Vec<f64>,
    pub frozen_drift: Vec<f64>,
    pub remainder: Vec<f64>,
    /// Conditional covariance of `j` given the step-start state.
    pub sigma_jk: Vec<f64>,
}

impl DecomposedStep {
    /// `remainder + frozen_drift` for all particles.
    pub fn gamma(&self) -> Vec<f64> {
        self.remainder.iter().zip(&self.frozen_drift).map(|(a, b)| a + b).collect()
    }

    pub fn particle(&self, i: usize, h: &HFunction) -> StepDecomposition {
        let d = self.start.d;
        let r = i * d..(i + 1) * d;
        let gamma = self.gamma();
        StepDecomposition {
            k: self.end.step_index,
            particle: i,
            x_prev: self.start.particle(i).to_vec(),
            increment: self.increment[r.clone()].to_vec(),
            j: self.j[r.clone()].to_vec(),
            gamma: gamma[r.clone()].to_vec(),
            frozen_drift: self.frozen_drift[r.clone()].to_vec(),
            remainder: self.remainder[r].to_vec(),
            sigma_jk: sigma_jk(&self.start, i, self.end.t - self.start.t, h),
        }
    }
}

fn inner_mesh<const D: usize, I: PairInteraction<D>>(
    pop: &Population,
    inter: &I,
    delta: f64,
    controls: StepControls,
    inner: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let x0 = to_fixed::<D>(&pop.positions);
    let mut x = x0.clone();
    let p = pop.len() as f64;
    let dt = delta / inner as f64;
    let (cd, cn) = (dt / p, (dt / p).sqrt());
    let mut j = vec![[0.0; D]; x.len()];
    let mut frozen_drift = vec![[0.0; D]; x.len()];
    for s in 0..inner {
        let key = derive_key(pop.seed, Purpose::InnerNoise, &[pop.step_index as u64, s as u64]);
        let sums = pairwise_sums(&x, &pop.ids, inter, key, controls, Some(&x0));
        if s == 0 {
            for (f, b) in frozen_drift.iter_mut().zip(&sums.drift) {
                for k in 0..D {
                    f[k] = delta / p * b[k];
                }
            }
        }
        for (i, xi) in x.iter_mut().enumerate() {
            for k in 0..D {
                xi[k] += cd * sums.drift[i][k] + cn * sums.noise[i][k];
            }
        }
        for (ji, f) in j.iter_mut().zip(&sums.frozen) {
            for k in 0..D {
                ji[k] += cn * f[k];
            }
        }
    }
    (to_flat(&x), to_flat(&j), to_flat(&frozen_drift))
}

/// Advances `pop` by one step of `spec.delta` on an inner mesh of `inner`
/// substeps and splits each particle's increment.
pub fn decompose_step_with<I>(
    pop: &Population,
    spec: &ModelSpec,
    inter: &I,
    controls: StepControls,
    inner: usize,
) -> Result<DecomposedStep>
where
    I: PairInteraction<2> + PairInteraction<3>,
{
    if inner < MIN_INNER_STEPS {
        return Err(Error::invalid(
            "inner_steps",
            "inner mesh must be at most delta/10 for the decomposition to be meaningful",
        ));
    }
    if pop.len() < 2 {
        return Err(Error::invalid("particles", "must be at least 2"));
    }
    let (x, j, frozen_drift) = match pop.d {
        2 => inner_mesh::<2, I>(pop, inter, spec.delta, controls, inner),
        3 => inner_mesh::<3, I>(pop, inter, spec.delta, controls, inner),
        d => return Err(Error::UnsupportedDimension(d)),
    };
    let mut end = pop.clone();
    end.positions = x;
    end.step_index += 1;
    end.t = end.step_index as f64 * spec.delta;
    if end.positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowup {
            step: end.step_index,
            time: end.t,
        });
    }
    let increment: Vec<f64> = end.positions.iter().zip(&pop.positions).map(|(a, b)| a - b).collect();
    let remainder = increment
        .iter()
        .zip(&j)
        .zip(&frozen_drift)
        .map(|((inc, j), f)| inc - j - f)
        .collect();
    Ok(DecomposedStep {
        start: pop.clone(),
        end,
        increment,
        j,
        frozen_drift,
        remainder,
    })
}

pub fn decompose_step(pop: &Population, spec: &ModelSpec, inner: usize) -> Result<DecomposedStep> {
    decompose_step_with(pop, spec, &spec.interaction(), StepControls::default(), inner)
}

/// `Delta * (1/P) sum_j a(X_i - X_j)`, row-major `d x d`.
pub fn sigma_jk(pop: &Population, i: usize, delta: f64, h: &HFunction) -> Vec<f64> {
    particle_coefficients(pop, i, h)
        .a_mean
        .iter()
        .map(|v| delta * v)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub k: usize,
    pub t: f64,
    pub particle: usize,
    pub lambda_min_over_delta: f64,
    /// `m * lambda_min(M_hat)`.
    pub bound_lower: f64,
    pub lambda_max_over_delta: f64,
    /// `2 C_sigma^2 (1 + |X|)^2 (1 + mean energy)`.
    pub bound_upper: f64,
    pub trace_over_delta: f64,
    pub x_norm: f64,
}

impl SpectrumRow {
    pub fn lower_ok(&self) -> bool {
        self.lambda_min_over_delta >= self.bound_lower - SPECTRUM_TOL
    }

    pub fn upper_ok(&self) -> bool {
        self.lambda_max_over_delta <= self.bound_upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub rows: Vec<SpectrumRow>,
    pub lower_violations: usize,
    pub upper_violations: usize,
    /// `m * min lambda_min(M_hat)` over all rows: the empirical stand-in for
    /// the lower spectrum constant.
    pub lambda1_hat: f64,
    pub lambda2_hat: f64,
}

impl SpectrumReport {
    pub fn passed(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,t,particle,lambda_min_over_delta,bound_lower,lambda_max_over_delta,bound_upper\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.k, r.t, r.particle, r.lambda_min_over_delta, r.bound_lower, r.lambda_max_over_delta, r.bound_upper
            ));
        }
        s
    }
}

#[allow(clippy::too_many_arguments)]
fn spectrum_row(
    k: usize,
    t: f64,
    particle: usize,
    x: &[f64],
    a_mean: &[f64],
    gram: &[f64],
    energy: f64,
    h: &HFunction,
) -> SpectrumRow {
    let d = x.len();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    SpectrumRow {
        k,
        t,
        particle,
        lambda_min_over_delta: lambda_min(a_mean, d),
        bound_lower: h.lower() * lambda_min(gram, d),
        lambda_max_over_delta: lambda_max(a_mean, d),
        bound_upper: 2.0 * sigma_growth_sq(d, h) * (1.0 + norm).powi(2) * (1.0 + energy),
        trace_over_delta: (0..d).map(|r| a_mean[r * d + r]).sum(),
        x_norm: norm,
    }
}

/// Spectrum rows for one population, one per particle.
pub fn population_spectrum(pop: &Population, h: &HFunction) -> Vec<SpectrumRow> {
    let energy = pop.energy();
    (0..pop.len())
        .into_par_iter()
        .map(|i| {
            let c = particle_coefficients(pop, i, h);
            spectrum_row(pop.step_index, pop.t, i, pop.particle(i), &c.a_mean, &c.gram, energy, h)
        })
        .collect()
}

/// Checks the spectrum sandwich of `Sigma(J_k) / Delta` on every tagged
/// record (every step) and on all particles of every recorded snapshot.
pub fn spectrum_bounds_check(traj: &Trajectory) -> SpectrumReport {
    let h = &traj.spec.h;
    let mut rows: Vec<SpectrumRow> = traj
        .tagged
        .iter()
        .map(|r| {
            let tagged = traj.initial().tagged;
            spectrum_row(r.step, r.t, tagged, &r.x, &r.coefficients.a_mean, &r.coefficients.gram, r.energy, h)
        })
        .collect();
    for pop in &traj.snapshots {
        rows.extend(population_spectrum(pop, h));
    }
    summarize(rows)
}

pub fn summarize(rows: Vec<SpectrumRow>) -> SpectrumReport {
    let lower_violations = rows.iter().filter(|r| !r.lower_ok()).count();
    let upper_violations = rows.iter().filter(|r| !r.upper_ok()).count();
    let lambda1_hat = rows.iter().map(|r| r.bound_lower).fold(f64::INFINITY, f64::min);
    let lambda2_hat = rows
        .iter()
        .map(|r| r.lambda_max_over_delta / (1.0 + r.x_norm).powi(2))
        .fold(0.0, f64::max);
    SpectrumReport {
        rows,
        lower_violations,
        upper_violations,
        lambda1_hat,
        lambda2_hat,
    }
}

/// Mean absolute raw increment and `|Gamma|` of the first step, per `Delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub deltas: Vec<f64>,
    pub replicas: usize,
    pub inner_steps: usize,
    pub mean_abs_increment: Vec<f64>,
    pub mean_abs_gamma: Vec<f64>,
    pub increment_fit: SlopeFit,
    pub gamma_fit: SlopeFit,
}

/// `|X_1 - X_0|` and `|Gamma_1|` of the tagged particle over one step from
/// the initial law.
pub fn first_step_magnitudes(spec: &ModelSpec, inner: usize) -> Result<(f64, f64)> {
    let pop = init_population(spec, None)?;
    let dec = decompose_step(&pop, spec, inner)?;
    let r = pop.tagged * spec.d..(pop.tagged + 1) * spec.d;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((norm(&dec.increment[r.clone()]), norm(&dec.gamma()[r])))
}

/// Regresses `log E|X_Delta - X_0|` and `log E|Gamma_1|` on `log Delta`.
pub fn increment_scaling(
    spec: &ModelSpec,
    deltas: &[f64],
    replicas: usize,
    inner: usize,
) -> Result<ScalingReport> {
    if deltas.len() < 3 {
        return Err(Error::invalid("deltas", "at least 3 step sizes are required"));
    }
    if replicas < 2 {
        return Err(Error::invalid("replicas", "at least 2 replicas are required"));
    }
    let mut inc_groups = Vec::new();
    let mut gamma_groups = Vec::new();
    for (g, &delta) in deltas.iter().enumerate() {
        let mut base = spec.clone();
        base.delta = delta;
        base.horizon = delta;
        base.validate()?;
        let base = base.replica(g as u64);
        let per: Vec<(f64, f64)> = (0..replicas as u64)
            .into_par_iter()
            .map(|r| first_step_magnitudes(&base.replica(r), inner))
            .collect::<Result<_>>()?;
        inc_groups.push(per.iter().map(|p| p.0).collect::<Vec<_>>());
        gamma_groups.push(per.iter().map(|p| p.1).collect::<Vec<_>>());
    }
    let seed = derive_key(spec.seed, Purpose::Bootstrap, &[]);
    let increment_fit = bootstrap_loglog_slope(deltas, &inc_groups, 2000, 0.95, seed);
    let gamma_fit = bootstrap_loglog_slope(deltas, &gamma_groups, 2000, 0.95, seed ^ 1);
    let means = |gs: &[Vec<f64>]| gs.iter().map(|g| crate::stats::mean(g)).collect();
    Ok(ScalingReport {
        deltas: deltas.to_vec(),
        replicas,
        inner_steps: inner,
        mean_abs_increment: means(&inc_groups),
        mean_abs_gamma: means(&gamma_groups),
        increment_fit,
        gamma_fit,
    })
}
