//! P-particle Euler discretization of the nonlinear Landau SDE.
//!
//! The law of the auxiliary process is replaced by the empirical measure of
//! the population. Two stepping schemes are offered:
//!
//! * `pairwise-shared-noise`: every unordered pair `{i, j}` carries its own
//!   Brownian increment `dB_ij = dB_ji`, and particle `i` receives
//!   `(dt/P) sum_j b(X_i - X_j) + P^{-1/2} sum_j sigma(X_i - X_j) dB_ij`.
//!   Because `b` and `sigma` are odd, the total momentum is conserved pathwise.
//! * `meanfield-gaussian`: particle `i` receives `dt B_i + S_i xi_i` where
//!   `S_i` is the PSD square root of `dt A_i`, `A_i = (1/P) sum_j a(X_i - X_j)`,
//!   and `xi_i` are independent across particles.
//!
//! All randomness is keyed by `(seed, step, particle ids)`; see [`crate::rng`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::canonical::content_hash;
use crate::engine::{
    meanfield_sums, pairwise_sums, to_fixed, LandauInteraction, PairInteraction,
    StepControls,
};
use crate::error::{Error, Result};
use crate::kernels::{a_fixed, b_fixed, norm_sq, HFunction};
use crate::linalg::{psd_sqrt, sym_eigen};
use crate::rng::{derive_key, mix64, CounterRng, Purpose};

/// Relative threshold of the non-collinearity check on the initial sample.
pub const H3_REL_TOL: f64 = 1e-6;
/// Negative eigenvalues of a covariance above `-PSD_REL_TOL * trace` are clamped.
pub const PSD_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    PairwiseSharedNoise,
    MeanfieldGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialLaw {
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    TwoPoint {
        x1: Vec<f64>,
        x2: Vec<f64>,
    },
    UniformBall {
        center: Vec<f64>,
        radius: f64,
    },
    /// Resampling (with replacement) of a point cloud, usually read from a
    /// snapshot or CSV file by [`InitialLaw::resolve`].
    Empirical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default)]
        points: Vec<Vec<f64>>,
    },
}

impl InitialLaw {
    pub fn standard_gaussian(d: usize) -> Self {
        InitialLaw::Gaussian {
            mean: vec![0.0; d],
            covariance: (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    /// Loads the points of an `Empirical` law from its file, if any.
    pub fn resolve(&mut self) -> Result<()> {
        if let InitialLaw::Empirical { path: Some(path), points } = self {
            if points.is_empty() {
                *points = crate::snapshot::read_points(path)?;
            }
        }
        Ok(())
    }

    fn validate(&self, d: usize) -> Result<()> {
        let dim = |field: &str, v: &[f64]| {
            if v.len() != d || v.iter().any(|x| !x.is_finite()) {
                Err(Error::invalid(field, format!("must be {d} finite coordinates")))
            } else {
                Ok(())
            }
        };
        match self {
            InitialLaw::Gaussian { mean, covariance } => {
                dim("init.mean", mean)?;
                if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid("init.covariance", format!("must be {d}x{d}")));
                }
                let flat: Vec<f64> = covariance.iter().flatten().copied().collect();
                for i in 0..d {
                    for j in 0..d {
                        if flat[i * d + j] != flat[j * d + i] {
                            return Err(Error::invalid("init.covariance", "must be symmetric"));
                        }
                    }
                }
                psd_sqrt(&flat, d, PSD_REL_TOL, 0)
                    .map_err(|_| Error::invalid("init.covariance", "must be positive semidefinite"))?;
            }
            InitialLaw::TwoPoint { x1, x2 } => {
                dim("init.x1", x1)?;
                dim("init.x2", x2)?;
            }
            InitialLaw::UniformBall { center, radius } => {
                dim("init.center", center)?;
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::invalid("init.radius", "must be positive"));
                }
            }
            InitialLaw::Empirical { points, .. } => {
                if points.is_empty() {
                    return Err(Error::invalid("init.points", "empirical law has no points"));
                }
                for p in points {
                    dim("init.points", p)?;
                }
            }
        }
        Ok(())
    }

    fn sampler(&self, d: usize) -> Box<dyn Fn(&mut CounterRng) -> Vec<f64> + '_> {
        match self {
            InitialLaw::Gaussian { mean, covariance } => {
                let flat: Vec<f64> = covariance.iter().flatten().copied().collect();
                let root = psd_sqrt(&flat, d, PSD_REL_TOL, 0).expect("validated covariance");
                Box::new(move |rng| {
                    let xi: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    (0..d)
                        .map(|r| mean[r] + (0..d).map(|c| root[r * d + c] * xi[c]).sum::<f64>())
                        .collect()
                })
            }
            InitialLaw::TwoPoint { x1, x2 } => Box::new(move |rng| {
                if rng.next_bit() {
                    x1.clone()
                } else {
                    x2.clone()
                }
            }),
            InitialLaw::UniformBall { center, radius } => Box::new(move |rng| {
                let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let r = radius * rng.uniform().powf(1.0 / d as f64);
                center.iter().zip(&dir).map(|(c, u)| c + r * u / n).collect()
            }),
            InitialLaw::Empirical { points, .. } => {
                Box::new(move |rng| points[rng.index(points.len())].clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d: usize,
    #[serde(default)]
    pub h: HFunction,
    pub particles: usize,
    pub delta: f64,
    pub horizon: f64,
    #[serde(default)]
    pub scheme: Scheme,
    pub seed: u64,
    pub init: InitialLaw,
}

impl ModelSpec {
    /// The reference configuration: Maxwellian molecules started from N(0, I).
    pub fn maxwellian(d: usize, particles: usize, delta: f64, horizon: f64, seed: u64) -> Self {
        Self {
            d,
            h: HFunction::default(),
            particles,
            delta,
            horizon,
            scheme: Scheme::PairwiseSharedNoise,
            seed,
            init: InitialLaw::standard_gaussian(d),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d != 2 && self.d != 3 {
            return Err(Error::UnsupportedDimension(self.d));
        }
        self.h.validate()?;
        if self.particles < 2 {
            return Err(Error::invalid("particles", "must be at least 2"));
        }
        if self.particles as u64 >= 1 << 32 {
            return Err(Error::invalid("particles", "must be below 2^32"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid("delta", "delta must be positive"));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid("horizon", "must be finite and non-negative"));
        }
        if self.horizon > 0.0 {
            if self.delta > self.horizon {
                return Err(Error::invalid("delta", "must not exceed the horizon"));
            }
            let n = (self.horizon / self.delta).round();
            if (n * self.delta - self.horizon).abs() > 1e-9 * self.horizon {
                return Err(Error::invalid(
                    "delta",
                    "horizon must be an integer multiple of delta",
                ));
            }
        }
        self.init.validate(self.d)
    }

    pub fn n_steps(&self) -> usize {
        if self.horizon == 0.0 {
            0
        } else {
            (self.horizon / self.delta).round() as usize
        }
    }

    pub fn hash(&self) -> String {
        content_hash(self).expect("model spec serializes")
    }

    /// Same model with the seed of replica `r` derived from this one.
    pub fn replica(&self, r: u64) -> Self {
        let mut s = self.clone();
        s.seed = derive_key(self.seed, Purpose::Replica, &[r]);
        s
    }

    pub(crate) fn interaction(&self) -> LandauInteraction {
        LandauInteraction::new(self.h)
    }
}

/// Velocities of all particles at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub d: usize,
    pub t: f64,
    pub step_index: usize,
    /// Row-major `P x d`.
    pub positions: Vec<f64>,
    /// Stable particle labels; the pair noise of `{i, j}` is keyed by them.
    pub ids: Vec<u64>,
    pub tagged: usize,
    /// Root of the counter-based stream lineage.
    pub seed: u64,
}

impl Population {
    pub fn from_points(points: &[Vec<f64>], seed: u64) -> Result<Self> {
        let d = points.first().map(|p| p.len()).unwrap_or(0);
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("points", "ragged point list"));
        }
        Ok(Self {
            d,
            t: 0.0,
            step_index: 0,
            positions: points.iter().flatten().copied().collect(),
            ids: (0..points.len() as u64).collect(),
            tagged: 0,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn tagged_position(&self) -> &[f64] {
        self.particle(self.tagged)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for p in self.positions.chunks_exact(self.d) {
            m.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= self.len() as f64);
        m
    }

    pub fn momentum(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for p in self.positions.chunks_exact(self.d) {
            m.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        m
    }

    /// Mean kinetic energy `(1/P) sum_i |X_i|^2`.
    pub fn energy(&self) -> f64 {
        self.positions.iter().map(|x| x * x).sum::<f64>() / self.len() as f64
    }

    /// `(1/P) sum_i (|X_i|^2 I - X_i X_i^T)`, row-major.
    pub fn nondegeneracy_matrix(&self) -> Vec<f64> {
        let d = self.d;
        let mut m = vec![0.0; d * d];
        for x in self.positions.chunks_exact(d) {
            let r: f64 = x.iter().map(|v| v * v).sum();
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] += if i == j { r } else { 0.0 } - x[i] * x[j];
                }
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }

    fn is_finite(&self) -> bool {
        self.positions.iter().all(|x| x.is_finite())
    }
}

/// The empirical H3 check: `lambda_min(E[|X|^2 I - X X^T]) > H3_REL_TOL E|X|^2`.
pub fn check_nondegenerate(pop: &Population) -> Result<f64> {
    let m = pop.nondegeneracy_matrix();
    let (vals, vecs) = sym_eigen(&m, pop.d);
    let threshold = H3_REL_TOL * pop.energy();
    if vals[0] <= threshold {
        return Err(Error::DegenerateInitialLaw {
            lambda_min: vals[0],
            threshold,
            direction: vecs[0].clone(),
        });
    }
    Ok(vals[0])
}

/// Draws `P` iid initial velocities; particle 0 (the tagged one) is moved to
/// `pin_tagged_at` when given.
pub fn init_population(spec: &ModelSpec, pin_tagged_at: Option<&[f64]>) -> Result<Population> {
    spec.validate()?;
    let d = spec.d;
    let sample = spec.init.sampler(d);
    let mut positions = Vec::with_capacity(spec.particles * d);
    for i in 0..spec.particles {
        let mut rng = CounterRng::new(derive_key(spec.seed, Purpose::Init, &[i as u64]));
        positions.extend(sample(&mut rng));
    }
    if let Some(x0) = pin_tagged_at {
        if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0", format!("must be {d} finite coordinates")));
        }
        positions[..d].copy_from_slice(x0);
    }
    let pop = Population {
        d,
        t: 0.0,
        step_index: 0,
        positions,
        ids: (0..spec.particles as u64).collect(),
        tagged: 0,
        seed: spec.seed,
    };
    check_nondegenerate(&pop)?;
    Ok(pop)
}

/// Drift and noise parts of one step, per particle (row-major `P x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepIncrements {
    pub drift: Vec<f64>,
    pub noise: Vec<f64>,
}

fn step_key(seed: u64, purpose: Purpose, step: usize) -> u64 {
    derive_key(seed, purpose, &[step as u64])
}

fn finish(
    pop: &Population,
    spec: &ModelSpec,
    drift: Vec<f64>,
    noise: Vec<f64>,
) -> Result<(Population, StepIncrements)> {
    let mut next = pop.clone();
    for ((x, a), b) in next.positions.iter_mut().zip(&drift).zip(&noise) {
        *x += a + b;
    }
    next.step_index += 1;
    next.t = next.step_index as f64 * spec.delta;
    if !next.is_finite() {
        return Err(Error::NumericalBlowup {
            step: next.step_index,
            time: next.t,
        });
    }
    Ok((next, StepIncrements { drift, noise }))
}

fn check_step_input(pop: &Population, spec: &ModelSpec) -> Result<()> {
    if pop.len() < 2 {
        return Err(Error::invalid("particles", "must be at least 2"));
    }
    if pop.d != spec.d {
        return Err(Error::invalid("d", "population and model dimensions differ"));
    }
    if pop.d != 2 && pop.d != 3 {
        return Err(Error::UnsupportedDimension(pop.d));
    }
    Ok(())
}

fn pairwise_fixed<const D: usize, I: PairInteraction<D>>(
    pop: &Population,
    inter: &I,
    delta: f64,
    key: u64,
    controls: StepControls,
) -> (Vec<f64>, Vec<f64>) {
    let x = to_fixed::<D>(&pop.positions);
    let sums = pairwise_sums(&x, &pop.ids, inter, key, controls, None);
    let p = pop.len() as f64;
    let (cd, cn) = (delta / p, (delta / p).sqrt());
    let drift = sums.drift.iter().flatten().map(|v| cd * v).collect();
    let noise = sums.noise.iter().flatten().map(|v| cn * v).collect();
    (drift, noise)
}

/// One step of the shared-noise scheme with an arbitrary pair interaction.
pub fn step_pairwise_with<I>(
    pop: &Population,
    spec: &ModelSpec,
    inter: &I,
    controls: StepControls,
) -> Result<(Population, StepIncrements)>
where
    I: PairInteraction<2> + PairInteraction<3>,
{
    check_step_input(pop, spec)?;
    let key = step_key(pop.seed, Purpose::PairNoise, pop.step_index);
    let (drift, noise) = match pop.d {
        2 => pairwise_fixed::<2, I>(pop, inter, spec.delta, key, controls),
        _ => pairwise_fixed::<3, I>(pop, inter, spec.delta, key, controls),
    };
    finish(pop, spec, drift, noise)
}

fn meanfield_fixed<const D: usize>(
    pop: &Population,
    spec: &ModelSpec,
    controls: StepControls,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = to_fixed::<D>(&pop.positions);
    let sums = meanfield_sums(&x, &spec.interaction());
    let p = pop.len() as f64;
    let delta = spec.delta;
    let mut drift = vec![0.0; x.len() * D];
    let mut noise = vec![0.0; x.len() * D];
    if controls.drift {
        for (o, v) in drift.iter_mut().zip(sums.drift.iter().flatten()) {
            *o = delta / p * v;
        }
    }
    if controls.noise {
        let key = step_key(pop.seed, Purpose::ParticleNoise, pop.step_index);
        for (i, cov) in sums.cov.iter().enumerate() {
            let flat: Vec<f64> = cov.iter().flatten().map(|v| delta / p * v).collect();
            let root = psd_sqrt(&flat, D, PSD_REL_TOL, i)?;
            let mut rng = CounterRng::new(mix64(key ^ pop.ids[i]));
            let xi: Vec<f64> = (0..D).map(|_| rng.normal()).collect();
            for r in 0..D {
                noise[i * D + r] = (0..D).map(|c| root[r * D + c] * xi[c]).sum();
            }
        }
    }
    Ok((drift, noise))
}

pub fn step_meanfield_with(
    pop: &Population,
    spec: &ModelSpec,
    controls: StepControls,
) -> Result<(Population, StepIncrements)> {
    check_step_input(pop, spec)?;
    let (drift, noise) = match pop.d {
        2 => meanfield_fixed::<2>(pop, spec, controls)?,
        _ => meanfield_fixed::<3>(pop, spec, controls)?,
    };
    finish(pop, spec, drift, noise)
}

pub fn step_pairwise(pop: &Population, spec: &ModelSpec) -> Result<Population> {
    step_pairwise_with(pop, spec, &spec.interaction(), StepControls::default()).map(|r| r.0)
}

pub fn step_meanfield_gaussian(pop: &Population, spec: &ModelSpec) -> Result<Population> {
    step_meanfield_with(pop, spec, StepControls::default()).map(|r| r.0)
}

/// One step of whichever scheme `spec` selects.
pub fn step(
    pop: &Population,
    spec: &ModelSpec,
    controls: StepControls,
) -> Result<(Population, StepIncrements)> {
    match spec.scheme {
        Scheme::PairwiseSharedNoise => step_pairwise_with(pop, spec, &spec.interaction(), controls),
        Scheme::MeanfieldGaussian => step_meanfield_with(pop, spec, controls),
    }
}

/// Mean-field coefficients seen by particle `i`:
/// `A = (1/P) sum_j a(X_i - X_j)`, `B = (1/P) sum_j b(X_i - X_j)` and the
/// `h`-free Gram matrix `G = (1/P) sum_j (|z|^2 I - z z^T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCoefficients {
    pub a_mean: Vec<f64>,
    pub b_mean: Vec<f64>,
    pub gram: Vec<f64>,
}

fn coefficients_fixed<const D: usize>(pop: &Population, i: usize, h: &HFunction) -> ParticleCoefficients {
    let xi = pop.particle(i);
    let mut a_sum = [[0.0; D]; D];
    let mut b_sum = [0.0; D];
    let mut g_sum = [[0.0; D]; D];
    for x in pop.positions.chunks_exact(D) {
        let mut z = [0.0; D];
        for k in 0..D {
            z[k] = xi[k] - x[k];
        }
        let a = a_fixed(&z, h);
        let b = b_fixed(&z, h);
        let r = norm_sq(&z);
        for r_ in 0..D {
            b_sum[r_] += b[r_];
            for c in 0..D {
                a_sum[r_][c] += a[r_][c];
                g_sum[r_][c] += if r_ == c { r } else { 0.0 } - z[r_] * z[c];
            }
        }
    }
    let p = pop.len() as f64;
    ParticleCoefficients {
        a_mean: a_sum.iter().flatten().map(|v| v / p).collect(),
        b_mean: b_sum.iter().map(|v| v / p).collect(),
        gram: g_sum.iter().flatten().map(|v| v / p).collect(),
    }
}

pub fn particle_coefficients(pop: &Population, i: usize, h: &HFunction) -> ParticleCoefficients {
    match pop.d {
        2 => coefficients_fixed::<2>(pop, i, h),
        3 => coefficients_fixed::<3>(pop, i, h),
        d => panic!("unsupported dimension {d}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingPlan {
    /// Keep a snapshot (and a moment row) every `every` steps; 0 keeps only the
    /// initial and final populations.
    #[serde(default)]
    pub every: usize,
    /// Record the tagged particle at every step, with its coefficients.
    #[serde(default)]
    pub tagged: bool,
}

impl Default for RecordingPlan {
    fn default() -> Self {
        Self {
            every: 0,
            tagged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    pub step: usize,
    pub mean: Vec<f64>,
    pub energy: f64,
    pub min_eig_empirical: f64,
}

impl MomentRow {
    pub fn of(pop: &Population) -> Self {
        Self {
            t: pop.t,
            step: pop.step_index,
            mean: pop.mean(),
            energy: pop.energy(),
            min_eig_empirical: sym_eigen(&pop.nondegeneracy_matrix(), pop.d).0[0],
        }
    }
}

/// State of the tagged particle at the start of a step, the increments it
/// received over the step and the coefficients it saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedRecord {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub drift: Vec<f64>,
    pub noise: Vec<f64>,
    pub energy: f64,
    pub coefficients: ParticleCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub spec: ModelSpec,
    pub controls_drift: bool,
    pub controls_noise: bool,
    pub snapshots: Vec<Population>,
    pub moments: Vec<MomentRow>,
    pub tagged: Vec<TaggedRecord>,
}

impl Trajectory {
    pub fn initial(&self) -> &Population {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Population {
        self.snapshots.last().expect("trajectory has an initial snapshot")
    }
}

pub fn run(spec: &ModelSpec, plan: &RecordingPlan) -> Result<Trajectory> {
    run_with(spec, plan, None, StepControls::default())
}

/// Advances `spec.n_steps()` steps from a fresh population.
pub fn run_with(
    spec: &ModelSpec,
    plan: &RecordingPlan,
    pin_tagged_at: Option<&[f64]>,
    controls: StepControls,
) -> Result<Trajectory> {
    let pop = init_population(spec, pin_tagged_at)?;
    run_from(pop, spec, plan, controls)
}

pub fn run_from(
    mut pop: Population,
    spec: &ModelSpec,
    plan: &RecordingPlan,
    controls: StepControls,
) -> Result<Trajectory> {
    let n = spec.n_steps();
    let mut traj = Trajectory {
        spec: spec.clone(),
        controls_drift: controls.drift,
        controls_noise: controls.noise,
        snapshots: vec![pop.clone()],
        moments: vec![MomentRow::of(&pop)],
        tagged: Vec::new(),
    };
    for k in 0..n {
        let coefficients = plan
            .tagged
            .then(|| particle_coefficients(&pop, pop.tagged, &spec.h));
        let (next, inc) = step(&pop, spec, controls)?;
        if let Some(coefficients) = coefficients {
            let d = pop.d;
            let ti = pop.tagged * d;
            traj.tagged.push(TaggedRecord {
                step: k,
                t: pop.t,
                x: pop.tagged_position().to_vec(),
                drift: inc.drift[ti..ti + d].to_vec(),
                noise: inc.noise[ti..ti + d].to_vec(),
                energy: pop.energy(),
                coefficients,
            });
        }
        pop = next;
        let at_snapshot = if plan.every == 0 {
            k + 1 == n
        } else {
            (k + 1) % plan.every == 0 || k + 1 == n
        };
        if at_snapshot {
            traj.moments.push(MomentRow::of(&pop));
            traj.snapshots.push(pop.clone());
        }
    }
    Ok(traj)
}
