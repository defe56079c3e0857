use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use landau_lab::orchestration::{
    exit_code_for, run_experiment, ExperimentConfig, ExperimentKind, EXIT_BLOWUP, EXIT_USAGE,
};
use landau_lab::Error;

const MINIMAL: &str = r#"
experiment = "simulate"

[model]
d = 2
particles = 1000
delta = 1e-3
horizon = 1.0
seed = 7

[model.h]
kind = "constant"
value = 1.0

[model.init]
kind = "gaussian"
mean = [0.0, 0.0]
covariance = [[1.0, 0.0], [0.0, 1.0]]
"#;

fn small_suite(out: &Path, workers: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::maxwellian(ExperimentKind::FullSuite);
    c.model.particles = 40;
    c.model.delta = 0.01;
    c.model.horizon = 0.2;
    c.recording.every = 5;
    c.replicas = 3;
    c.workers = Some(workers);
    c.output_dir = out.to_path_buf();
    c.density.particles = Some(20);
    c.density.replicas = Some(200);
    c.scaling.particles = Some(20);
    c.scaling.replicas = Some(20);
    c.scaling.inner_steps = 10;
    c.tail.qv_delta = 0.01;
    c.tail.qv_horizon = 0.2;
    c.tail.qv_particles = Some(20);
    c
}

fn files_under(root: &Path) -> BTreeSet<String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn minimal_config_is_accepted_and_round_trips() {
    let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
    assert_eq!(cfg.experiment, ExperimentKind::Simulate);
    assert_eq!(cfg.model.particles, 1000);
    let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.hash(), cfg.hash());
}

#[test]
fn zero_delta_is_rejected() {
    let text = MINIMAL.replace("delta = 1e-3", "delta = 0.0");
    let err = ExperimentConfig::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("delta must be positive"), "{err}");
    assert_eq!(exit_code_for(&err), EXIT_USAGE);
}

#[test]
fn collinear_two_point_law_is_rejected() {
    let text = MINIMAL.replace(
        "kind = \"gaussian\"\nmean = [0.0, 0.0]\ncovariance = [[1.0, 0.0], [0.0, 1.0]]",
        "kind = \"two-point\"\nx1 = [1.0, 0.0]\nx2 = [-1.0, 0.0]",
    );
    let err = ExperimentConfig::from_toml(&text).unwrap_err();
    assert!(matches!(err, Error::DegenerateInitialLaw { .. }), "{err}");
    let ok = text.replace("x2 = [-1.0, 0.0]", "x2 = [0.0, 1.0]");
    ExperimentConfig::from_toml(&ok).unwrap();
}

#[test]
fn unknown_experiment_is_rejected() {
    let text = MINIMAL.replace("\"simulate\"", "\"calibrate\"");
    let err = ExperimentConfig::from_toml(&text).unwrap_err();
    assert!(matches!(err, Error::Parse(_)), "{err}");
    assert!(err.to_string().contains("line 2"), "{err}");
    assert!(ExperimentKind::parse("calibrate").is_err());
    assert_eq!(ExperimentKind::parse("full-suite").unwrap(), ExperimentKind::FullSuite);
}

#[test]
fn unknown_fields_are_rejected() {
    let text = MINIMAL.replace("seed = 7", "seed = 7\nsteps = 4");
    assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Parse(_))));
}

#[test]
fn hash_tracks_meaningful_fields_only() {
    let base = ExperimentConfig::from_toml(MINIMAL).unwrap();
    let mut same = base.clone();
    same.workers = Some(3);
    same.output_dir = "elsewhere".into();
    assert_eq!(same.hash(), base.hash());
    let mut seed = base.clone();
    seed.model.seed += 1;
    let mut delta = base.clone();
    delta.model.delta = 2e-3;
    let mut reps = base.clone();
    reps.replicas = 2;
    let hashes: BTreeSet<String> = [&base, &seed, &delta, &reps].iter().map(|c| c.hash()).collect();
    assert_eq!(hashes.len(), 4);
}

#[test]
fn full_suite_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("one"), dir.path().join("four"));
    let ma = run_experiment(&small_suite(&a, 1)).unwrap();
    let mb = run_experiment(&small_suite(&b, 4)).unwrap();
    assert!(ma.error.is_none(), "{:?}", ma.error);
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.artifacts, mb.artifacts);
    let names: Vec<&str> = ma.checks.iter().map(|c| c.name.as_str()).collect();
    for want in [
        "momentum_conservation",
        "energy_conservation",
        "spectrum_lower",
        "spectrum_upper",
        "scaling_increment",
        "scaling_gamma",
        "density_positivity",
        "sandwich_gaussian_oracle",
        "density_sandwich",
        "tail_bound",
        "logmartingale_qv",
        "weakform_identity",
        "moment_balance_00",
    ] {
        assert!(names.contains(&want), "missing {want}");
    }
    for name in &ma.artifacts {
        if name == "manifest.json" || name == "config.toml" {
            continue;
        }
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert!(x == y, "{name} differs");
    }
    let listed: BTreeSet<String> = ma.artifacts.iter().cloned().collect();
    assert_eq!(files_under(&a), listed);
}

#[test]
fn blowup_is_reported_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
    cfg.model.particles = 10;
    cfg.model.delta = 10.0;
    cfg.model.horizon = 4000.0;
    cfg.output_dir = dir.path().to_path_buf();
    let m = run_experiment(&cfg).unwrap();
    assert_eq!(m.exit_code, EXIT_BLOWUP);
    assert!(m.error.unwrap().contains("blowup"));
    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk["exit_code"], EXIT_BLOWUP);
}
