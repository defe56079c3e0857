//! Experiment configuration, dispatch and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{
    default_tail_levels, tail_report, verify_logmartingale, verify_sandwich, CheckStatus,
};
use crate::canonical::content_hash;
use crate::density::{
    ball_grid, collect_tagged_samples, density_fields, DensityField, MollifierKind, TaggedSamples,
};
use crate::error::{Error, Result};
use crate::rng::{derive_key, CounterRng, Purpose};
use crate::scheme::{increment_scaling, spectrum_bounds_check, DEFAULT_INNER_STEPS};
use crate::simulator::{init_population, run, ModelSpec, RecordingPlan, Scheme, Trajectory};
use crate::snapshot::format_snapshot;
use crate::weakform::{moment_balance_check, weakform_rhs, TestFunction};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    AnalyzeScheme,
    EstimateDensity,
    VerifyBounds,
    CheckMoments,
    FullSuite,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(Value::String(name.to_string()))
            .map_err(|_| Error::invalid("experiment", format!("unknown experiment '{name}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    /// Pinned start of the tagged particle; defaults to the first unit vector.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Defaults to a quarter, half and all of the horizon.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default = "default_kernel")]
    pub kernel: MollifierKind,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub pool_all: bool,
    #[serde(default)]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub particles: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
}

fn default_radius() -> f64 {
    3.0
}
fn default_spacing() -> f64 {
    0.25
}
fn default_kernel() -> MollifierKind {
    MollifierKind::Bump
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            x0: None,
            times: None,
            radius: default_radius(),
            spacing: default_spacing(),
            kernel: default_kernel(),
            eta: None,
            pool_all: false,
            replicas: None,
            particles: None,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_inner")]
    pub inner_steps: usize,
    #[serde(default)]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub particles: Option<usize>,
}

fn default_deltas() -> Vec<f64> {
    vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
}
fn default_inner() -> usize {
    DEFAULT_INNER_STEPS
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            deltas: default_deltas(),
            inner_steps: default_inner(),
            replicas: None,
            particles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Time of the tail test; defaults to the last density time.
    #[serde(default)]
    pub time: Option<f64>,
    #[serde(default = "default_qv_delta")]
    pub qv_delta: f64,
    #[serde(default = "default_qv_horizon")]
    pub qv_horizon: f64,
    #[serde(default)]
    pub qv_particles: Option<usize>,
}

fn default_levels() -> usize {
    40
}
fn default_qv_delta() -> f64 {
    1e-4
}
fn default_qv_horizon() -> f64 {
    1.0
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            time: None,
            qv_delta: default_qv_delta(),
            qv_horizon: default_qv_horizon(),
            qv_particles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    #[serde(default = "default_phis")]
    pub phi: Vec<TestFunction>,
    /// Defaults to `[0, horizon]`.
    #[serde(default)]
    pub window: Option<(f64, f64)>,
}

fn default_phis() -> Vec<TestFunction> {
    vec![
        TestFunction::Energy,
        TestFunction::Coordinate { index: 0 },
        TestFunction::Quadratic { i: 0, j: 1 },
    ]
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            phi: default_phis(),
            window: None,
        }
    }
}

fn default_replicas() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub recording: RecordingPlan,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub strict: bool,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub tail: TailConfig,
    #[serde(default)]
    pub moments: MomentsConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub experiment: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub strict: bool,
    pub workers: Option<usize>,
    pub replicas: Option<usize>,
}

fn multiple_of(t: f64, delta: f64) -> bool {
    let k = (t / delta).round();
    k >= 1.0 && (k * delta - t).abs() <= 1e-9 * t
}

impl ExperimentConfig {
    /// Reference configuration for `kind`: `d = 2` Maxwellian molecules with
    /// smaller populations for the replica-hungry density and scaling runs.
    pub fn maxwellian(kind: ExperimentKind) -> Self {
        Self {
            experiment: kind,
            model: ModelSpec::maxwellian(2, 1000, 1e-3, 1.0, 1),
            recording: RecordingPlan { every: 50, tagged: true },
            replicas: 8,
            strict: false,
            workers: None,
            output_dir: default_output(),
            density: DensityConfig {
                replicas: Some(10_000),
                particles: Some(100),
                delta: Some(1e-2),
                ..DensityConfig::default()
            },
            scaling: ScalingConfig {
                replicas: Some(1000),
                particles: Some(100),
                ..ScalingConfig::default()
            },
            tail: TailConfig {
                qv_particles: Some(200),
                ..TailConfig::default()
            },
            moments: MomentsConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.model.init.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(k) = o.experiment {
            self.experiment = k;
        }
        if let Some(s) = o.seed {
            self.model.seed = s;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        self.strict |= o.strict;
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if let Some(r) = o.replicas {
            self.replicas = r;
        }
        self.validate()
    }

    /// Eager validation of every precondition the pipelines rely on,
    /// including the non-collinearity of the initial sample.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.replicas == 0 {
            return Err(Error::invalid("replicas", "must be positive"));
        }
        if self.workers == Some(0) {
            return Err(Error::invalid("workers", "must be positive"));
        }
        let d = self.model.d;
        use ExperimentKind::*;
        let k = self.experiment;
        if matches!(k, EstimateDensity | VerifyBounds | FullSuite) {
            self.validate_density()?;
        }
        if matches!(k, VerifyBounds | FullSuite) {
            if self.tail.levels < 4 {
                return Err(Error::invalid("tail.levels", "must be at least 4"));
            }
            if !self.density_times().contains(&self.tail_time()) {
                return Err(Error::invalid("tail.time", "must be one of the density times"));
            }
            self.qv_spec().validate()?;
        }
        if matches!(k, AnalyzeScheme | FullSuite) {
            if self.scaling.deltas.len() < 3 || self.scaling.deltas.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid("scaling.deltas", "at least 3 positive step sizes are required"));
            }
            if self.scaling.inner_steps < crate::scheme::MIN_INNER_STEPS {
                return Err(Error::invalid("scaling.inner_steps", "must be at least 10"));
            }
            if self.scaling.replicas.unwrap_or(self.replicas) < 2 {
                return Err(Error::invalid("scaling.replicas", "must be at least 2"));
            }
        }
        if matches!(k, CheckMoments | FullSuite) {
            for phi in &self.moments.phi {
                phi.validate(d)?;
            }
            let (a, b) = self.moment_window();
            if !(a < b) {
                return Err(Error::invalid("moments.window", "must be an increasing pair"));
            }
            let every = self.recording.every;
            let recorded = if every == 0 { 0 } else { self.model.n_steps() / every + 1 };
            if recorded < 5 {
                return Err(Error::invalid("recording.every", "moment checks need at least 5 recorded times"));
            }
        }
        init_population(&self.model, None)?;
        Ok(())
    }

    fn validate_density(&self) -> Result<()> {
        let dens = self.density_spec();
        dens.validate()?;
        if let Some(x0) = &self.density.x0 {
            if x0.len() != self.model.d || x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("density.x0", "must be d finite coordinates"));
            }
        }
        for &t in &self.density_times() {
            if !multiple_of(t, dens.delta) {
                return Err(Error::invalid("density.times", "must be positive multiples of delta"));
            }
        }
        if !(self.density.radius > 0.0 && self.density.spacing > 0.0) {
            return Err(Error::invalid("density.radius/spacing", "must be positive"));
        }
        if let Some(eta) = self.density.eta {
            if !(eta > 0.0) {
                return Err(Error::invalid("density.eta", "must be positive"));
            }
        }
        Ok(())
    }

    /// Hash of everything that can change numeric output.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("workers");
            m.remove("output_dir");
        }
        content_hash(&v).expect("config serializes")
    }

    pub fn density_spec(&self) -> ModelSpec {
        let mut s = self.model.clone();
        if let Some(p) = self.density.particles {
            s.particles = p;
        }
        if let Some(dt) = self.density.delta {
            s.delta = dt;
        }
        s.horizon = self
            .density_times()
            .iter()
            .copied()
            .fold(s.delta, f64::max);
        s.horizon = (s.horizon / s.delta).round() * s.delta;
        s
    }

    pub fn density_times(&self) -> Vec<f64> {
        self.density.times.clone().unwrap_or_else(|| {
            let h = self.model.horizon;
            vec![h / 4.0, h / 2.0, h]
        })
    }

    pub fn density_x0(&self) -> Vec<f64> {
        self.density.x0.clone().unwrap_or_else(|| {
            let mut x = vec![0.0; self.model.d];
            x[0] = 1.0;
            x
        })
    }

    pub fn tail_time(&self) -> f64 {
        self.tail
            .time
            .unwrap_or_else(|| self.density_times().iter().copied().fold(0.0, f64::max))
    }

    pub fn qv_spec(&self) -> ModelSpec {
        let mut s = self.model.clone();
        s.delta = self.tail.qv_delta;
        s.horizon = self.tail.qv_horizon;
        if let Some(p) = self.tail.qv_particles {
            s.particles = p;
        }
        s.seed = derive_key(self.model.seed, Purpose::Replica, &[u64::MAX]);
        s
    }

    pub fn scaling_spec(&self) -> ModelSpec {
        let mut s = self.model.clone();
        if let Some(p) = self.scaling.particles {
            s.particles = p;
        }
        s
    }

    pub fn moment_window(&self) -> (f64, f64) {
        self.moments.window.unwrap_or((0.0, self.model.horizon))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub detail: Value,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: Value) -> Self {
        Self {
            name: name.to_string(),
            status: if passed { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub checks: Vec<CheckResult>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub error: Option<String>,
    pub exit_code: i32,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, &text)
    }
}

fn moments_csv(traj: &Trajectory) -> String {
    let d = traj.spec.d;
    let mut s = String::from("t,");
    for k in 1..=d {
        s.push_str(&format!("mean_{k},"));
    }
    s.push_str("energy,min_eig_empirical\n");
    for m in &traj.moments {
        s.push_str(&format!("{},", m.t));
        for v in &m.mean {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!("{},{}\n", m.energy, m.min_eig_empirical));
    }
    s
}

fn run_replicas(spec: &ModelSpec, plan: &RecordingPlan, replicas: usize) -> Result<Vec<Trajectory>> {
    (0..replicas as u64)
        .into_par_iter()
        .map(|r| run(&spec.replica(r), plan))
        .collect()
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    out: Output,
    checks: Vec<CheckResult>,
}

fn simulate(ctx: &mut Context, trajs: &[Trajectory]) -> Result<()> {
    let spec = &ctx.cfg.model;
    for (r, traj) in trajs.iter().enumerate() {
        ctx.out.write(&format!("simulate/replica_{r:04}/moments.csv"), &moments_csv(traj))?;
    }
    let hash = spec.hash();
    let mut index = Vec::new();
    for pop in &trajs[0].snapshots {
        let name = format!("simulate/replica_0000/snapshot_{:07}.csv", pop.step_index);
        ctx.out.write(&name, &format_snapshot(pop, &hash))?;
        index.push(json!({"step": pop.step_index, "t": pop.t, "file": name}));
    }
    ctx.out.json(
        "simulate/trajectory.json",
        &json!({"spec_hash": hash, "replicas": trajs.len(), "snapshots": index}),
    )?;

    if spec.scheme == Scheme::PairwiseSharedNoise {
        let p = spec.particles as f64;
        let tol = 1e-9 * p * spec.n_steps().max(1) as f64;
        let mut drift = 0.0f64;
        for tr in trajs {
            let m0 = &tr.moments[0].mean;
            for m in &tr.moments {
                for (a, b) in m.mean.iter().zip(m0) {
                    drift = drift.max((a - b).abs() * p);
                }
            }
        }
        ctx.checks.push(CheckResult::new(
            "momentum_conservation",
            drift <= tol,
            json!({"max_drift": drift, "tolerance": tol}),
        ));
    }
    let e0: f64 = trajs.iter().map(|t| t.initial().energy()).sum::<f64>() / trajs.len() as f64;
    let e1: f64 = trajs.iter().map(|t| t.last().energy()).sum::<f64>() / trajs.len() as f64;
    let rel = (e1 - e0).abs() / e0;
    ctx.checks.push(CheckResult::new(
        "energy_conservation",
        rel <= 0.05,
        json!({"initial": e0, "final": e1, "relative_change": rel, "tolerance": 0.05}),
    ));
    Ok(())
}

fn analyze_scheme(ctx: &mut Context, trajs: &[Trajectory]) -> Result<()> {
    let mut lower = 0;
    let mut upper = 0;
    let mut rows = 0;
    let mut lambda1 = f64::INFINITY;
    let mut lambda2 = 0.0f64;
    for (r, traj) in trajs.iter().enumerate() {
        let rep = spectrum_bounds_check(traj);
        if r == 0 {
            ctx.out.write("scheme/spectrum_replica_0000.csv", &rep.to_csv())?;
        }
        lower += rep.lower_violations;
        upper += rep.upper_violations;
        rows += rep.rows.len();
        lambda1 = lambda1.min(rep.lambda1_hat);
        lambda2 = lambda2.max(rep.lambda2_hat);
    }
    let summary = json!({
        "rows": rows, "lower_violations": lower, "upper_violations": upper,
        "lambda1_hat": lambda1, "lambda2_hat": lambda2,
    });
    ctx.out.json("scheme/spectrum.json", &summary)?;
    ctx.checks.push(CheckResult::new("spectrum_lower", lower == 0, summary.clone()));
    ctx.checks.push(CheckResult::new("spectrum_upper", upper == 0, summary));

    let cfg = ctx.cfg;
    let replicas = cfg.scaling.replicas.unwrap_or(cfg.replicas);
    let rep = increment_scaling(&cfg.scaling_spec(), &cfg.scaling.deltas, replicas, cfg.scaling.inner_steps)?;
    ctx.out.json("scheme/scaling.json", &rep)?;
    for (name, fit, target, band) in [
        ("scaling_increment", &rep.increment_fit, 0.5, 0.1),
        ("scaling_gamma", &rep.gamma_fit, 1.0, 0.15),
    ] {
        let passed = (fit.slope - target).abs() <= band && fit.ci_low <= target && target <= fit.ci_high;
        ctx.checks.push(CheckResult::new(
            name,
            passed,
            json!({"slope": fit.slope, "ci": [fit.ci_low, fit.ci_high], "target": target, "band": band}),
        ));
    }
    Ok(())
}

fn estimate_density(ctx: &mut Context) -> Result<(TaggedSamples, Vec<DensityField>)> {
    let cfg = ctx.cfg;
    let spec = cfg.density_spec();
    let x0 = cfg.density_x0();
    let replicas = cfg.density.replicas.unwrap_or(cfg.replicas);
    let tagged = collect_tagged_samples(&spec, &x0, &cfg.density_times(), replicas, cfg.density.pool_all)?;
    let grid = ball_grid(&x0, cfg.density.radius, cfg.density.spacing);
    let fields = density_fields(&tagged, spec.delta, &grid, cfg.density.kernel, cfg.density.eta)?;
    let mut meta = Vec::new();
    let mut positive = true;
    let mut significant = 0;
    for (k, f) in fields.iter().enumerate() {
        let name = format!("density/field_{k:02}.csv");
        ctx.out.write(&name, &f.to_csv())?;
        for (s, v) in f.significant(3.0).iter().zip(&f.values) {
            if *s {
                significant += 1;
                positive &= *v > 0.0;
            }
        }
        meta.push(json!({
            "file": name, "t": f.t, "eta": f.eta, "n_samples": f.n_samples, "x0": f.x0,
            "spec_hash": spec.hash(), "pooled_all_particles": tagged.pooled_all,
            "lambda1_hat": tagged.lambda1_hat,
        }));
    }
    ctx.out.json("density/fields.json", &meta)?;
    ctx.checks.push(CheckResult {
        name: "density_positivity".into(),
        status: match (significant, positive) {
            (0, _) => CheckStatus::Inconclusive,
            (_, true) => CheckStatus::Pass,
            _ => CheckStatus::Fail,
        },
        detail: json!({"fields": fields.len(), "significant_points": significant}),
    });
    Ok((tagged, fields))
}

/// Exact Gaussian samples with the spread of the real ones; the pipeline
/// must recover a sandwich on them before it is trusted on simulated data.
fn synthetic_gaussian(seed: u64, x0: &[f64], t: f64, n: usize) -> Vec<Vec<f64>> {
    let sd = (2.0 * t).sqrt();
    (0..n as u64)
        .map(|i| {
            let mut rng = CounterRng::new(derive_key(seed, Purpose::Synthetic, &[i, t.to_bits()]));
            x0.iter().map(|c| c + sd * rng.normal()).collect()
        })
        .collect()
}

fn verify_bounds(ctx: &mut Context, tagged: &TaggedSamples, fields: &[DensityField]) -> Result<()> {
    let cfg = ctx.cfg;
    let x0 = cfg.density_x0();
    let grid = &fields[0].grid;

    let oracle_samples = TaggedSamples {
        samples: tagged
            .times
            .iter()
            .zip(&tagged.samples)
            .map(|(&t, s)| synthetic_gaussian(cfg.model.seed, &x0, t, s.len()))
            .collect(),
        ..tagged.clone()
    };
    let etas: Vec<f64> = fields.iter().map(|f| f.eta).collect();
    let oracle_fields: Vec<DensityField> = oracle_samples
        .times
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let single = TaggedSamples {
                times: vec![oracle_samples.times[k]],
                samples: vec![oracle_samples.samples[k].clone()],
                ..oracle_samples.clone()
            };
            density_fields(&single, 1.0, grid, cfg.density.kernel, Some(etas[k])).map(|mut v| v.remove(0))
        })
        .collect::<Result<_>>()?;
    let oracle = verify_sandwich(&oracle_fields, &x0)?;
    ctx.out.json("bounds/oracle_sandwich.json", &oracle)?;
    ctx.checks.push(CheckResult {
        name: "sandwich_gaussian_oracle".into(),
        status: oracle.status,
        detail: json!({"violation_fraction": oracle.violation_fraction, "test_points": oracle.test_points}),
    });

    let mut rep = verify_sandwich(fields, &x0)?;
    rep.params.lambda1_hat = tagged.lambda1_hat;
    ctx.out.json("bounds/sandwich.json", &rep)?;
    ctx.checks.push(CheckResult {
        name: "density_sandwich".into(),
        status: rep.status,
        detail: json!({
            "violation_fraction": rep.violation_fraction, "test_points": rep.test_points,
            "lower_violations": rep.lower_violations, "upper_violations": rep.upper_violations,
            "positivity": rep.positivity,
        }),
    });

    let t = cfg.tail_time();
    let k = tagged
        .times
        .iter()
        .position(|&s| s == t)
        .ok_or_else(|| Error::invalid("tail.time", "must be one of the density times"))?;
    let tail = tail_report(t, &tagged.samples[k], &x0, &default_tail_levels(cfg.tail.levels))?;
    ctx.out.write("bounds/tail.csv", &tail.to_csv())?;
    ctx.out.json("bounds/tail.json", &tail)?;
    ctx.checks.push(CheckResult {
        name: "tail_bound".into(),
        status: tail.status,
        detail: json!({"c1": tail.c1, "c2": tail.c2, "tested": tail.tested, "violations": tail.violations}),
    });

    let qv_spec = cfg.qv_spec();
    let traj = run(&qv_spec, &RecordingPlan { every: 0, tagged: true })?;
    let lm = verify_logmartingale(&traj)?;
    let mut csv = String::from("t,realized_qv,predicted_qv\n");
    for ((t, a), b) in lm.times.iter().zip(&lm.realized_qv).zip(&lm.predicted_qv) {
        csv.push_str(&format!("{t},{a},{b}\n"));
    }
    ctx.out.write("bounds/logmartingale.csv", &csv)?;
    ctx.out.json(
        "bounds/logmartingale.json",
        &json!({
            "slope": lm.slope, "bound": lm.bound, "max_drift_integrands": lm.max_drift_integrands,
            "warnings": lm.warnings, "passed": lm.passed,
        }),
    )?;
    ctx.checks.push(CheckResult::new(
        "logmartingale_qv",
        lm.passed,
        json!({"slope": lm.slope, "bound": lm.bound}),
    ));
    Ok(())
}

fn check_moments(ctx: &mut Context, trajs: &[Trajectory]) -> Result<()> {
    let cfg = ctx.cfg;
    let h = cfg.model.h;
    let mut worst = 0.0f64;
    let mut populations = 0;
    for traj in trajs {
        for pop in &traj.snapshots {
            populations += 1;
            let mut phis = vec![TestFunction::Energy];
            phis.extend((0..pop.d).map(|index| TestFunction::Coordinate { index }));
            for phi in &phis {
                let w = weakform_rhs(pop, phi, &h)?;
                worst = worst.max(w.value.abs() / w.scale.max(f64::MIN_POSITIVE));
            }
        }
    }
    ctx.checks.push(CheckResult::new(
        "weakform_identity",
        worst <= 1e-12,
        json!({"populations": populations, "max_relative": worst, "tolerance": 1e-12}),
    ));
    let window = cfg.moment_window();
    for (k, phi) in cfg.moments.phi.iter().enumerate() {
        let rep = moment_balance_check(trajs, phi, window)?;
        ctx.out.write(&format!("moments/balance_{k:02}.csv"), &rep.to_csv())?;
        ctx.out.json(&format!("moments/balance_{k:02}.json"), &rep)?;
        ctx.checks.push(CheckResult::new(
            &format!("moment_balance_{k:02}"),
            rep.passed,
            json!({"phi": phi, "integrated_residual": rep.integrated_residual, "se": rep.integrated_se}),
        ));
    }
    Ok(())
}

fn dispatch(ctx: &mut Context) -> Result<()> {
    let cfg = ctx.cfg;
    let kind = cfg.experiment;
    let needs_traj = matches!(
        kind,
        ExperimentKind::Simulate
            | ExperimentKind::AnalyzeScheme
            | ExperimentKind::CheckMoments
            | ExperimentKind::FullSuite
    );
    let trajs = if needs_traj {
        let mut plan = cfg.recording.clone();
        plan.tagged |= matches!(kind, ExperimentKind::AnalyzeScheme | ExperimentKind::FullSuite);
        run_replicas(&cfg.model, &plan, cfg.replicas)?
    } else {
        Vec::new()
    };
    if matches!(kind, ExperimentKind::Simulate | ExperimentKind::FullSuite) {
        simulate(ctx, &trajs)?;
    }
    if matches!(kind, ExperimentKind::AnalyzeScheme | ExperimentKind::FullSuite) {
        analyze_scheme(ctx, &trajs)?;
    }
    if matches!(
        kind,
        ExperimentKind::EstimateDensity | ExperimentKind::VerifyBounds | ExperimentKind::FullSuite
    ) {
        let (tagged, fields) = estimate_density(ctx)?;
        if kind != ExperimentKind::EstimateDensity {
            verify_bounds(ctx, &tagged, &fields)?;
        }
    }
    if matches!(kind, ExperimentKind::CheckMoments | ExperimentKind::FullSuite) {
        check_moments(ctx, &trajs)?;
    }
    Ok(())
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NumericalBlowup { .. } => EXIT_BLOWUP,
        Error::Invalid { .. }
        | Error::Parse(_)
        | Error::UnsupportedDimension(_)
        | Error::DegenerateInitialLaw { .. } => EXIT_USAGE,
        _ => EXIT_CHECK_FAILED,
    }
}

/// Runs the configured pipeline, writes every artifact and `manifest.json`
/// into the output directory and returns the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let started_at = now();
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut ctx = Context {
        cfg,
        out: Output {
            dir: cfg.output_dir.clone(),
            files: Vec::new(),
        },
        checks: Vec::new(),
    };
    ctx.out.write("config.toml", &cfg.to_toml()?)?;
    let result = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid("workers", e.to_string()))?
            .install(|| dispatch(&mut ctx)),
        None => dispatch(&mut ctx),
    };
    let failed = ctx.checks.iter().any(|c| c.status == CheckStatus::Fail);
    let (error, exit_code) = match &result {
        Err(e) => (Some(e.to_string()), exit_code_for(e)),
        Ok(()) if failed && cfg.strict => (None, EXIT_CHECK_FAILED),
        Ok(()) => (None, EXIT_PASS),
    };
    let mut artifacts = ctx.out.files.clone();
    artifacts.push("manifest.json".into());
    let manifest = RunManifest {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed: cfg.model.seed,
        code_version: CODE_VERSION.to_string(),
        started_at,
        finished_at: now(),
        checks: ctx.checks,
        artifacts,
        error,
        exit_code,
    };
    let path = cfg.output_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
