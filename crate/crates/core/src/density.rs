//! Mollifier kernel density estimates of the tagged particle's law.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::StepControls;
use crate::error::{Error, Result};
use crate::linalg::lambda_min;
use crate::simulator::{init_population, particle_coefficients, step, ModelSpec};
use crate::stats::variance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MollifierKind {
    /// `exp(-1 / (1 - |x|^2))` on the unit ball.
    Bump,
    /// `prod_i cos^2(pi sqrt(d) x_i / 2)` on the cube inscribed in the unit ball.
    ProductCosine,
}

/// `phi_eta(x) = eta^{-d} phi(x / eta)` with `phi` supported in the unit ball
/// and normalized to unit mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub kind: MollifierKind,
    pub d: usize,
    pub eta: f64,
    /// `1 / integral of the unnormalized base`.
    pub norm: f64,
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Surface area of the unit sphere in `R^d`.
fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI * sphere_area(d - 2) / (d as f64 - 2.0),
    }
}

fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

fn cosine_factor(x: f64, d: usize) -> f64 {
    let a = 1.0 / (d as f64).sqrt();
    if x.abs() <= a {
        (std::f64::consts::FRAC_PI_2 * x / a).cos().powi(2)
    } else {
        0.0
    }
}

/// Mass of the unnormalized base function, by quadrature.
pub fn base_mass(kind: MollifierKind, d: usize) -> f64 {
    const N: usize = 20_000;
    match kind {
        MollifierKind::Bump => {
            sphere_area(d) * simpson(|r| r.powi(d as i32 - 1) * bump(r * r), 0.0, 1.0, N)
        }
        MollifierKind::ProductCosine => {
            let a = 1.0 / (d as f64).sqrt();
            simpson(|x| cosine_factor(x, d), -a, a, N).powi(d as i32)
        }
    }
}

pub fn make_mollifier(kind: MollifierKind, d: usize, eta: f64) -> Result<Mollifier> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta", "bandwidth must be positive"));
    }
    if d == 0 {
        return Err(Error::UnsupportedDimension(d));
    }
    Ok(Mollifier {
        kind,
        d,
        eta,
        norm: 1.0 / base_mass(kind, d),
    })
}

impl Mollifier {
    /// Normalized base `phi(y)`.
    pub fn base(&self, y: &[f64]) -> f64 {
        let v = match self.kind {
            MollifierKind::Bump => bump(y.iter().map(|v| v * v).sum()),
            MollifierKind::ProductCosine => y.iter().map(|&v| cosine_factor(v, self.d)).product(),
        };
        self.norm * v
    }

    /// `phi_eta(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let inv = 1.0 / self.eta;
        let mut y = [0.0; 8];
        let y = &mut y[..x.len()];
        for (o, v) in y.iter_mut().zip(x) {
            *o = v * inv;
        }
        inv.powi(self.d as i32) * self.base(y)
    }

    /// `phi_eta(0)`, the largest value of the kernel.
    pub fn peak(&self) -> f64 {
        self.eval(&vec![0.0; self.d])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub grid: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub eta: f64,
    pub n_samples: usize,
    pub t: f64,
    pub x0: Vec<f64>,
}

impl DensityField {
    pub fn to_csv(&self) -> String {
        let d = self.grid.first().map_or(0, Vec::len);
        let mut s: String = (1..=d).map(|k| format!("v_{k},")).collect();
        s.push_str("value,stderr\n");
        for ((g, v), e) in self.grid.iter().zip(&self.values).zip(&self.stderr) {
            for c in g {
                s.push_str(&format!("{c},"));
            }
            s.push_str(&format!("{v},{e}\n"));
        }
        s
    }

    /// Values exceeding `k` standard errors.
    pub fn significant(&self, k: f64) -> Vec<bool> {
        self.values.iter().zip(&self.stderr).map(|(v, e)| v.abs() > k * e).collect()
    }
}

/// `values[g] = (1/n) sum_s phi_eta(samples[s] - grid[g])` with the standard
/// error of that mean.
pub fn estimate_density(samples: &[Vec<f64>], grid: &[Vec<f64>], m: &Mollifier) -> Result<DensityField> {
    if samples.is_empty() {
        return Err(Error::invalid("samples", "must not be empty"));
    }
    let n = samples.len() as f64;
    let (values, stderr) = grid
        .par_iter()
        .map(|g| {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut diff = vec![0.0; g.len()];
            for x in samples {
                for ((o, a), b) in diff.iter_mut().zip(x).zip(g) {
                    *o = a - b;
                }
                let v = m.eval(&diff);
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / n;
            let var = if n > 1.0 {
                ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            (mean, (var / n).sqrt())
        })
        .unzip();
    Ok(DensityField {
        grid: grid.to_vec(),
        values,
        stderr,
        eta: m.eta,
        n_samples: samples.len(),
        t: 0.0,
        x0: Vec::new(),
    })
}

/// Uniform lattice `lo + k * spacing` inside the box `[lo, hi]`.
pub fn lattice(lo: &[f64], hi: &[f64], spacing: f64) -> Vec<Vec<f64>> {
    let counts: Vec<usize> = lo
        .iter()
        .zip(hi)
        .map(|(a, b)| ((b - a) / spacing + 1e-9).floor() as usize + 1)
        .collect();
    let total: usize = counts.iter().product();
    (0..total)
        .map(|mut idx| {
            lo.iter()
                .zip(&counts)
                .map(|(a, &c)| {
                    let k = idx % c;
                    idx /= c;
                    a + k as f64 * spacing
                })
                .collect()
        })
        .collect()
}

/// Lattice points centred on `center` within distance `radius` of it.
pub fn ball_grid(center: &[f64], radius: f64, spacing: f64) -> Vec<Vec<f64>> {
    let k = (radius / spacing + 1e-9).floor();
    let lo: Vec<f64> = center.iter().map(|c| c - k * spacing).collect();
    let hi: Vec<f64> = center.iter().map(|c| c + k * spacing).collect();
    lattice(&lo, &hi, spacing)
        .into_iter()
        .filter(|g| {
            let r2: f64 = g.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
            r2 <= radius * radius * (1.0 + 1e-12)
        })
        .collect()
}

/// Box `x0 +- 4 sd` per axis.
pub fn default_box(samples: &[Vec<f64>], x0: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sd = axis_sd(samples);
    (
        x0.iter().zip(&sd).map(|(c, s)| c - 4.0 * s).collect(),
        x0.iter().zip(&sd).map(|(c, s)| c + 4.0 * s).collect(),
    )
}

fn axis_sd(samples: &[Vec<f64>]) -> Vec<f64> {
    let d = samples[0].len();
    (0..d)
        .map(|k| variance(&samples.iter().map(|s| s[k]).collect::<Vec<_>>()).sqrt())
        .collect()
}

/// `min(sqrt(lambda1 * delta), n^{-1/(d+4)} sigma)` with `sigma` the mean
/// per-axis sample standard deviation.
pub fn default_bandwidth(samples: &[Vec<f64>], lambda1: f64, delta: f64) -> f64 {
    let d = samples[0].len();
    let sd = axis_sd(samples);
    let sigma = sd.iter().sum::<f64>() / d as f64;
    let rate = (samples.len() as f64).powf(-1.0 / (d as f64 + 4.0)) * sigma;
    (lambda1 * delta).sqrt().min(rate)
}

/// Tagged-particle positions at the requested times, pooled over replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSamples {
    pub x0: Vec<f64>,
    pub times: Vec<f64>,
    /// `samples[k]` are the positions at `times[k]`.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// `m * min lambda_min(M_hat)` seen by the tagged particle over all
    /// replicas and steps.
    pub lambda1_hat: f64,
    /// Every particle was pooled, not just the tagged one.
    pub pooled_all: bool,
    pub replicas: usize,
}

fn steps_for(times: &[f64], delta: f64) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            let k = (t / delta).round();
            if t <= 0.0 || (k * delta - t).abs() > 1e-9 * t {
                Err(Error::invalid("times", "must be positive multiples of delta"))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// Runs `replicas` independent populations with the tagged particle pinned
/// at `x0` and records it at each of `times`.
pub fn collect_tagged_samples(
    spec: &ModelSpec,
    x0: &[f64],
    times: &[f64],
    replicas: usize,
    pool_all: bool,
) -> Result<TaggedSamples> {
    if x0.len() != spec.d || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x0", "must be a finite point of dimension d"));
    }
    if replicas == 0 {
        return Err(Error::invalid("replicas", "must be positive"));
    }
    spec.validate()?;
    let steps = steps_for(times, spec.delta)?;
    let last = steps.iter().copied().max().unwrap_or(0);
    let m = spec.h.lower();
    let per: Vec<(Vec<Vec<Vec<f64>>>, f64)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let s = spec.replica(r);
            let mut pop = init_population(&s, Some(x0))?;
            let mut out = vec![Vec::new(); steps.len()];
            let mut lam = f64::INFINITY;
            for k in 0..=last {
                for (slot, &want) in out.iter_mut().zip(&steps) {
                    if want == k {
                        *slot = if pool_all {
                            pop.positions.chunks_exact(pop.d).map(<[f64]>::to_vec).collect()
                        } else {
                            vec![pop.tagged_position().to_vec()]
                        };
                    }
                }
                if k == last {
                    break;
                }
                let c = particle_coefficients(&pop, pop.tagged, &s.h);
                lam = lam.min(lambda_min(&c.gram, pop.d));
                pop = step(&pop, &s, StepControls::default())?.0;
            }
            Ok((out, lam))
        })
        .collect::<Result<_>>()?;
    let mut samples = vec![Vec::new(); steps.len()];
    let mut lam = f64::INFINITY;
    for (out, l) in per {
        lam = lam.min(l);
        for (acc, s) in samples.iter_mut().zip(out) {
            acc.extend(s);
        }
    }
    Ok(TaggedSamples {
        x0: x0.to_vec(),
        times: times.to_vec(),
        samples,
        lambda1_hat: m * lam,
        pooled_all: pool_all,
        replicas,
    })
}

/// Kernel estimates of the tagged particle's law at each collected time. The
/// bandwidth follows [`default_bandwidth`] unless `eta` is given.
pub fn density_fields(
    tagged: &TaggedSamples,
    delta: f64,
    grid: &[Vec<f64>],
    kind: MollifierKind,
    eta: Option<f64>,
) -> Result<Vec<DensityField>> {
    tagged
        .times
        .iter()
        .zip(&tagged.samples)
        .map(|(&t, s)| {
            if s.is_empty() {
                return Err(Error::invalid("samples", "must not be empty"));
            }
            let eta = eta.unwrap_or_else(|| default_bandwidth(s, tagged.lambda1_hat, delta));
            let m = make_mollifier(kind, s[0].len(), eta)?;
            let mut f = estimate_density(s, grid, &m)?;
            f.t = t;
            f.x0 = tagged.x0.clone();
            Ok(f)
        })
        .collect()
}

/// Pinned-start simulation followed by kernel estimation on `grid`.
pub fn conditional_density_experiment(
    spec: &ModelSpec,
    x0: &[f64],
    times: &[f64],
    grid: &[Vec<f64>],
    replicas: usize,
) -> Result<Vec<DensityField>> {
    let tagged = collect_tagged_samples(spec, x0, times, replicas, false)?;
    density_fields(&tagged, spec.delta, grid, MollifierKind::Bump, None)
}
