//! Acceptance criteria C1-C8. Prints one line per criterion and exits
//! nonzero if any of them fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;

use landau_lab::bounds::{
    default_tail_levels, tail_report, verify_logmartingale, verify_sandwich, CheckStatus,
};
use landau_lab::density::{
    ball_grid, collect_tagged_samples, density_fields, estimate_density, make_mollifier,
    DensityField, MollifierKind, TaggedSamples,
};
use landau_lab::engine::StepControls;
use landau_lab::kernels::{check_divergence_identity, CoefficientEval, HFunction};
use landau_lab::orchestration::{run_experiment, ExperimentConfig, ExperimentKind};
use landau_lab::rng::{derive_key, CounterRng, Purpose};
use landau_lab::scheme::{increment_scaling, population_spectrum, spectrum_bounds_check, SpectrumReport};
use landau_lab::simulator::{init_population, run, step, ModelSpec, Population, RecordingPlan, Trajectory};
use landau_lab::weakform::{weakform_rhs, TestFunction};
use landau_lab::Result;

const SEED: u64 = 20_240_601;

struct Line {
    id: &'static str,
    title: &'static str,
    limit: f64,
}

fn report(line: Line, secs: f64, outcome: Result<(bool, String)>) -> bool {
    let (ok, detail) = match outcome {
        Ok((ok, d)) => (ok, d),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = secs < line.limit;
    let pass = ok && in_time;
    let timing = if in_time { String::new() } else { " over time limit;".to_string() };
    println!(
        "{} {} {} ({:.1} s, limit {:.0} s);{} {}",
        line.id,
        if pass { "PASS" } else { "FAIL" },
        line.title,
        secs,
        line.limit,
        timing,
        detail
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn c1() -> Result<(bool, String)> {
    let mut rng = CounterRng::new(derive_key(SEED, Purpose::Synthetic, &[1]));
    let (mut worst_fact, mut worst_az, mut worst_div) = (0.0f64, 0.0f64, 0.0f64);
    let mut symmetric = true;
    let mut psd = true;
    for d in [2usize, 3] {
        for h in HFunction::registry() {
            for _ in 0..10_000 {
                let scale = 10f64.powf(2.0 * rng.uniform() - 1.0);
                let z: Vec<f64> = (0..d).map(|_| scale * rng.normal()).collect();
                let r2: f64 = z.iter().map(|v| v * v).sum();
                let e = CoefficientEval::at(&z, &h)?;
                let neg: Vec<f64> = z.iter().map(|v| -v).collect();
                let en = CoefficientEval::at(&neg, &h)?;
                worst_fact = worst_fact.max(e.factorization_residual() / (1.0 + r2).powi(2));
                let az = (&e.a * &e.z).amax();
                worst_az = worst_az.max(az / (h.upper() * r2.powf(1.5)));
                symmetric &= e.a == en.a && e.b == -&en.b && e.sigma == -&en.sigma;
                let eig = e.a.clone().symmetric_eigen().eigenvalues;
                psd &= eig.min() >= -1e-12 * (1.0 + r2);
                if d == 2 {
                    let top = h.value(r2) * r2;
                    psd &= eig.min().abs() <= 1e-12 * (1.0 + r2) && (eig.max() - top).abs() <= 1e-12 * (1.0 + top);
                }
            }
        }
        let one = HFunction::Constant { value: 1.0 };
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
            worst_div = worst_div.max(check_divergence_identity(&z, &one, 1e-4)?);
        }
    }
    let ok = worst_fact <= 1e-12 && worst_az <= 1e-13 && symmetric && psd && worst_div <= 1e-6;
    Ok((
        ok,
        format!(
            "max |ss*-a|/(1+|z|^2)^2 = {worst_fact:.2e}, max |az|/(M|z|^3) = {worst_az:.2e}, parities exact = {symmetric}, spectra ok = {psd}, divergence residual = {worst_div:.2e}"
        ),
    ))
}

fn c2() -> Result<(bool, String)> {
    let spec = ModelSpec::maxwellian(2, 500, 1e-3, 1.0, SEED);
    let mut pop = init_population(&spec, None)?;
    let m0 = pop.momentum();
    let n = spec.n_steps();
    let mut worst = 0.0f64;
    for _ in 0..n {
        pop = step(&pop, &spec, StepControls::default())?.0;
        for (a, b) in pop.momentum().iter().zip(&m0) {
            worst = worst.max((a - b).abs());
        }
    }
    let tol = 1e-9 * spec.particles as f64 * n as f64;
    Ok((worst <= tol, format!("max |sum X(t) - sum X(0)| = {worst:.2e} over {n} steps (tolerance {tol:.1e})")))
}

fn c3_runs() -> Result<Vec<Trajectory>> {
    let spec = ModelSpec::maxwellian(2, 2000, 1e-3, 1.0, SEED);
    let plan = RecordingPlan { every: 50, tagged: true };
    (0..20u64).into_par_iter().map(|r| run(&spec.replica(r), &plan)).collect()
}

fn c3(trajs: &[Trajectory]) -> Result<(bool, String)> {
    let n = trajs.len() as f64;
    let e0 = trajs.iter().map(|t| t.initial().energy()).sum::<f64>() / n;
    let e1 = trajs.iter().map(|t| t.last().energy()).sum::<f64>() / n;
    let rel = (e1 - e0).abs() / e0;
    let h = trajs[0].spec.h;
    let mut worst = 0.0f64;
    let mut populations = 0;
    for tr in trajs {
        for pop in &tr.snapshots {
            let w = weakform_rhs(pop, &TestFunction::Energy, &h)?;
            worst = worst.max(w.value.abs() / w.scale);
            populations += 1;
        }
    }
    Ok((
        rel <= 0.05 && worst <= 1e-12,
        format!(
            "energy {e0:.5} -> {e1:.5} (relative change {rel:.2e}, tolerance 5e-2); weak-form |rhs|/scale <= {worst:.2e} on {populations} populations"
        ),
    ))
}

fn c4(trajs: &[Trajectory]) -> Result<(bool, String)> {
    let reports: Vec<SpectrumReport> = trajs.iter().map(spectrum_bounds_check).collect();
    let rows: usize = reports.iter().map(|r| r.rows.len()).sum();
    let lower: usize = reports.iter().map(|r| r.lower_violations).sum();
    let upper: usize = reports.iter().map(|r| r.upper_violations).sum();
    let h = HFunction::default();
    let two = Population::from_points(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 0)?;
    let tight = population_spectrum(&two, &h)
        .iter()
        .all(|r| r.lambda_min_over_delta.abs() < 1e-15 && r.bound_lower.abs() < 1e-15);
    let three = Population::from_points(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 0)?;
    let lam = population_spectrum(&three, &h)[0].lambda_min_over_delta;
    let hand = (lam - (1.0 - 5f64.sqrt() / 3.0)).abs() <= 1e-12 && (lam - 0.2546).abs() < 1e-4;
    Ok((
        lower == 0 && upper == 0 && tight && hand,
        format!(
            "{rows} rows, {lower} lower and {upper} upper violations; two-point tight = {tight}; three-point lambda_min = {lam:.12}"
        ),
    ))
}

fn c5() -> Result<(bool, String)> {
    let spec = ModelSpec::maxwellian(2, 100, 0.1, 0.1, SEED);
    let rep = increment_scaling(&spec, &[1e-1, 3e-2, 1e-2, 3e-3, 1e-3], 1000, 50)?;
    let check = |f: &landau_lab::stats::SlopeFit, target: f64, band: f64| {
        (f.slope - target).abs() <= band && f.ci_low <= target && target <= f.ci_high
    };
    let (a, b) = (&rep.increment_fit, &rep.gamma_fit);
    Ok((
        check(a, 0.5, 0.1) && check(b, 1.0, 0.15),
        format!(
            "increment slope {:.4} CI [{:.4}, {:.4}] (target 0.5 +- 0.1); Gamma slope {:.4} CI [{:.4}, {:.4}] (target 1 +- 0.15)",
            a.slope, a.ci_low, a.ci_high, b.slope, b.ci_low, b.ci_high
        ),
    ))
}

const X0: [f64; 2] = [1.0, 0.0];
const TIMES: [f64; 3] = [0.25, 0.5, 1.0];

fn tagged_samples() -> Result<TaggedSamples> {
    let spec = ModelSpec::maxwellian(2, 100, 1e-2, 1.0, SEED);
    collect_tagged_samples(&spec, &X0, &TIMES, 10_000, false)
}

fn c6(tagged: &TaggedSamples) -> Result<(bool, String)> {
    let tail = tail_report(1.0, &tagged.samples[2], &X0, &default_tail_levels(40))?;
    let tail_ok = tail.status == CheckStatus::Pass;
    let mut spec = ModelSpec::maxwellian(2, 200, 1e-4, 1.0, SEED);
    spec.seed = derive_key(SEED, Purpose::Replica, &[u64::MAX]);
    let traj = run(&spec, &RecordingPlan { every: 0, tagged: true })?;
    let lm = verify_logmartingale(&traj)?;
    Ok((
        tail_ok && lm.passed,
        format!(
            "tail: c1 = {:.3}, c2 = {:.3}, {} violations on {} tested radii ({:?}); <M>_t/t slope {:.4} <= {:.1}",
            tail.c1, tail.c2, tail.violations, tail.tested, tail.status, lm.slope, lm.bound
        ),
    ))
}

fn c7(tagged: &TaggedSamples) -> Result<(bool, String)> {
    let grid = ball_grid(&X0, 3.0, 0.25);
    let fields = density_fields(tagged, 1e-2, &grid, MollifierKind::Bump, None)?;
    let oracle: Vec<DensityField> = fields
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let sd = (2.0 * f.t).sqrt();
            let mut rng = CounterRng::new(derive_key(SEED, Purpose::Synthetic, &[7, k as u64]));
            let s: Vec<Vec<f64>> =
                (0..f.n_samples).map(|_| X0.iter().map(|c| c + sd * rng.normal()).collect()).collect();
            let m = make_mollifier(MollifierKind::Bump, 2, f.eta)?;
            let mut g = estimate_density(&s, &grid, &m)?;
            g.t = f.t;
            g.x0 = X0.to_vec();
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let o = verify_sandwich(&oracle, &X0)?;
    let r = verify_sandwich(&fields, &X0)?;
    let ok = o.status == CheckStatus::Pass && r.status == CheckStatus::Pass && r.positivity;
    Ok((
        ok,
        format!(
            "oracle {:?} ({:.2}% of {} test points violate); simulated {:?} ({:.2}% of {} violate), positivity = {}, eta = {:.3}",
            o.status,
            100.0 * o.violation_fraction,
            o.test_points,
            r.status,
            100.0 * r.violation_fraction,
            r.test_points,
            r.positivity,
            fields[0].eta
        ),
    ))
}

fn artifact_bytes(dir: &Path, names: &[String]) -> Vec<(String, Vec<u8>)> {
    names
        .iter()
        .filter(|n| *n != "manifest.json" && *n != "config.toml")
        .map(|n| (n.clone(), fs::read(dir.join(n)).unwrap_or_default()))
        .collect()
}

fn c8() -> Result<(bool, String)> {
    let dir = tempfile::tempdir().map_err(|e| landau_lab::Error::io("tempdir", e))?;
    let mut runs = Vec::new();
    for workers in [1usize, 4] {
        let mut cfg = ExperimentConfig::maxwellian(ExperimentKind::FullSuite);
        cfg.model.seed = SEED;
        cfg.workers = Some(workers);
        cfg.output_dir = dir.path().join(format!("w{workers}"));
        let m = run_experiment(&cfg)?;
        let files = artifact_bytes(&cfg.output_dir, &m.artifacts);
        runs.push((m, files));
    }
    let (ma, fa) = &runs[0];
    let (mb, fb) = &runs[1];
    let differing: Vec<&str> = fa
        .iter()
        .zip(fb)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let ok = ma.error.is_none() && mb.error.is_none() && fa.len() == fb.len() && differing.is_empty();
    let checks: Vec<String> = ma.checks.iter().map(|c| format!("{}={:?}", c.name, c.status)).collect();
    Ok((
        ok,
        format!(
            "{} artifacts compared, {} differ; suite checks: {}",
            fa.len(),
            differing.len(),
            checks.join(" ")
        ),
    ))
}

fn main() -> ExitCode {
    let mut all = true;

    let (r, s) = timed(c1);
    all &= report(Line { id: "C1", title: "kernel identities", limit: 5.0 }, s, r);

    let (r, s) = timed(c2);
    all &= report(Line { id: "C2", title: "pathwise momentum conservation", limit: 60.0 }, s, r);

    let (runs, s_runs) = timed(c3_runs);
    match runs {
        Ok(trajs) => {
            let (r, s) = timed(|| c3(&trajs));
            all &= report(Line { id: "C3", title: "energy balance and weak-form identity", limit: 600.0 }, s_runs + s, r);
            let (r, s) = timed(|| c4(&trajs));
            all &= report(Line { id: "C4", title: "covariance spectrum sandwich", limit: 60.0 }, s, r);
        }
        Err(e) => {
            report(Line { id: "C3", title: "energy balance and weak-form identity", limit: 600.0 }, s_runs, Err(e));
            println!("C4 FAIL covariance spectrum sandwich; no trajectories");
            all = false;
        }
    }

    let (r, s) = timed(c5);
    all &= report(Line { id: "C5", title: "increment scaling regressions", limit: 900.0 }, s, r);

    let (tagged, s_tagged) = timed(tagged_samples);
    match tagged {
        Ok(tagged) => {
            let (r, s) = timed(|| c6(&tagged));
            all &= report(Line { id: "C6", title: "tail bound and log-martingale variation", limit: 1200.0 }, s_tagged + s, r);
            let (r, s) = timed(|| c7(&tagged));
            all &= report(Line { id: "C7", title: "density sandwich and positivity", limit: 1800.0 }, s_tagged + s, r);
        }
        Err(e) => {
            report(Line { id: "C6", title: "tail bound and log-martingale variation", limit: 1200.0 }, s_tagged, Err(e));
            println!("C7 FAIL density sandwich and positivity; no samples");
            all = false;
        }
    }

    let (r, s) = timed(c8);
    all &= report(Line { id: "C8", title: "determinism across worker counts", limit: 1800.0 }, s, r);

    println!("acceptance: {}", if all { "all criteria passed" } else { "some criteria failed" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
