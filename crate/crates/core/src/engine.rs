//! Deterministic O(P^2) pair accumulation.
//!
//! Particles are cut into fixed blocks of `BLOCK` and every pair is visited
//! exactly once inside an upper-triangular tile `(I, J)`, `I <= J`. Tiles run
//! in parallel and return their row and column partial sums; the reduction
//! walks the tiles in a fixed order, so the floating-point result is the same
//! for any number of worker threads.

use rayon::prelude::*;

use crate::kernels::{a_fixed, noise_components, norm_sq, sigma_unit_apply, HFunction};
use crate::rng::{pair_key, CounterRng};

pub const BLOCK: usize = 64;

/// Coefficients of a pair interaction in fixed dimension `D`.
pub trait PairInteraction<const D: usize>: Sync {
    /// `drift(-z) = -drift(z)` and `sigma(-z) = -sigma(z)`.
    fn antisymmetric(&self) -> bool {
        true
    }
    /// Number of standard normals read by `terms`.
    fn noise_dim(&self) -> usize;
    /// `(b(z), sigma(z) xi)`.
    fn terms(&self, z: &[f64; D], xi: &[f64]) -> ([f64; D], [f64; D]);
    /// `sigma(z) sigma(z)^T`.
    fn covariance(&self, z: &[f64; D]) -> [[f64; D]; D];
}

/// The Landau coefficients `a`, `b`, `sigma` for a given `h`.
#[derive(Debug, Clone, Copy)]
pub struct LandauInteraction {
    h: HFunction,
    constant: Option<(f64, f64)>,
}

impl LandauInteraction {
    pub fn new(h: HFunction) -> Self {
        let constant = match h {
            HFunction::Constant { value } => Some((value, value.sqrt())),
            _ => None,
        };
        Self { h, constant }
    }

    pub fn h(&self) -> &HFunction {
        &self.h
    }
}

impl<const D: usize> PairInteraction<D> for LandauInteraction {
    fn noise_dim(&self) -> usize {
        noise_components(D)
    }

    #[inline(always)]
    fn terms(&self, z: &[f64; D], xi: &[f64]) -> ([f64; D], [f64; D]) {
        let (hv, sq) = match self.constant {
            Some(c) => c,
            None => {
                let hv = self.h.value(norm_sq(z));
                (hv, hv.sqrt())
            }
        };
        let c = -(D as f64 - 1.0) * hv;
        let mut b = [0.0; D];
        for k in 0..D {
            b[k] = c * z[k];
        }
        let mut s = sigma_unit_apply(z, xi);
        for v in s.iter_mut() {
            *v *= sq;
        }
        (b, s)
    }

    fn covariance(&self, z: &[f64; D]) -> [[f64; D]; D] {
        a_fixed(z, &self.h)
    }
}

/// Which parts of the dynamics are active; the switches are test hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepControls {
    pub drift: bool,
    pub noise: bool,
}

impl Default for StepControls {
    fn default() -> Self {
        Self {
            drift: true,
            noise: true,
        }
    }
}

impl StepControls {
    pub fn noiseless() -> Self {
        Self {
            drift: true,
            noise: false,
        }
    }

    pub fn frozen() -> Self {
        Self {
            drift: false,
            noise: false,
        }
    }
}

pub fn to_fixed<const D: usize>(flat: &[f64]) -> Vec<[f64; D]> {
    flat.chunks_exact(D)
        .map(|c| {
            let mut v = [0.0; D];
            v.copy_from_slice(c);
            v
        })
        .collect()
}

pub fn to_flat<const D: usize>(v: &[[f64; D]]) -> Vec<f64> {
    v.iter().flat_map(|x| x.iter().copied()).collect()
}

fn tiles(p: usize) -> Vec<(usize, usize)> {
    let nb = p.div_ceil(BLOCK);
    let mut out = Vec::with_capacity(nb * (nb + 1) / 2);
    for bi in 0..nb {
        for bj in bi..nb {
            out.push((bi, bj));
        }
    }
    out
}

fn block_range(b: usize, p: usize) -> std::ops::Range<usize> {
    b * BLOCK..((b + 1) * BLOCK).min(p)
}

#[inline(always)]
fn add<const D: usize>(acc: &mut [f64; D], v: &[f64; D]) {
    for k in 0..D {
        acc[k] += v[k];
    }
}

/// Raw (unscaled) pair sums of the shared-noise scheme for every particle:
/// `sum_j b(x_i - x_j)`, `sum_j sigma(x_i - x_j) xi_ij` and, when `frozen` is
/// given, `sum_j sigma(y_i - y_j) xi_ij` with the same normals.
pub struct PairwiseSums<const D: usize> {
    pub drift: Vec<[f64; D]>,
    pub noise: Vec<[f64; D]>,
    pub frozen: Vec<[f64; D]>,
}

struct PairTile<const D: usize> {
    row: [Vec<[f64; D]>; 3],
    col: [Vec<[f64; D]>; 3],
}

#[inline(always)]
fn neg<const D: usize>(mut z: [f64; D]) -> [f64; D] {
    z.iter_mut().for_each(|v| *v = -*v);
    z
}

#[allow(clippy::too_many_arguments)]
fn pair_tile<const D: usize, I, const DRIFT: bool, const NOISE: bool, const FROZEN: bool>(
    x: &[[f64; D]],
    ids: &[u64],
    inter: &I,
    step_key: u64,
    frozen: &[[f64; D]],
    bi: usize,
    bj: usize,
) -> PairTile<D>
where
    I: PairInteraction<D>,
{
    let p = x.len();
    let ri = block_range(bi, p);
    let rj = block_range(bj, p);
    let nd = inter.noise_dim();
    let anti = inter.antisymmetric();
    let sized = |n: usize, on: bool| vec![[0.0; D]; if on { n } else { 0 }];
    let mut row = [
        sized(ri.len(), DRIFT),
        sized(ri.len(), NOISE),
        sized(ri.len(), FROZEN),
    ];
    let mut col = [
        sized(rj.len(), DRIFT),
        sized(rj.len(), NOISE),
        sized(rj.len(), FROZEN),
    ];
    let mut normals = [[0.0f64; 3]; BLOCK];
    for i in ri.clone() {
        let li = i - ri.start;
        let jstart = if bi == bj { i + 1 } else { rj.start };
        let xi_pos = x[i];
        if NOISE {
            for j in jstart..rj.end {
                let mut rng = CounterRng::new(pair_key(step_key, ids[i], ids[j]));
                for v in normals[j - rj.start].iter_mut().take(nd) {
                    *v = rng.normal();
                }
            }
        }
        let (mut racc_b, mut racc_s, mut racc_f) = ([0.0; D], [0.0; D], [0.0; D]);
        for j in jstart..rj.end {
            let lj = j - rj.start;
            let xj = &x[j];
            let xi = &normals[lj];
            let mut z = [0.0; D];
            for k in 0..D {
                z[k] = xi_pos[k] - xj[k];
            }
            let (b, s) = inter.terms(&z, &xi[..nd]);
            let (bn, sn) = if anti {
                (neg(b), neg(s))
            } else {
                inter.terms(&neg(z), &xi[..nd])
            };
            if DRIFT {
                add(&mut racc_b, &b);
                add(&mut col[0][lj], &bn);
            }
            if NOISE {
                add(&mut racc_s, &s);
                add(&mut col[1][lj], &sn);
            }
            if FROZEN {
                let mut z0 = [0.0; D];
                for k in 0..D {
                    z0[k] = frozen[i][k] - frozen[j][k];
                }
                let (_, s0) = inter.terms(&z0, &xi[..nd]);
                let s0n = if anti {
                    neg(s0)
                } else {
                    inter.terms(&neg(z0), &xi[..nd]).1
                };
                add(&mut racc_f, &s0);
                add(&mut col[2][lj], &s0n);
            }
        }
        if DRIFT {
            row[0][li] = racc_b;
        }
        if NOISE {
            row[1][li] = racc_s;
        }
        if FROZEN {
            row[2][li] = racc_f;
        }
    }
    PairTile { row, col }
}

pub fn pairwise_sums<const D: usize, I: PairInteraction<D>>(
    x: &[[f64; D]],
    ids: &[u64],
    inter: &I,
    step_key: u64,
    controls: StepControls,
    frozen: Option<&[[f64; D]]>,
) -> PairwiseSums<D> {
    let p = x.len();
    let with_frozen = frozen.is_some() && controls.noise;
    let y = frozen.unwrap_or(&[]);
    let tile_list = tiles(p);
    let kernel: fn(&[[f64; D]], &[u64], &I, u64, &[[f64; D]], usize, usize) -> PairTile<D> =
        match (controls.drift, controls.noise, with_frozen) {
            (true, true, false) => pair_tile::<D, I, true, true, false>,
            (true, true, true) => pair_tile::<D, I, true, true, true>,
            (false, true, false) => pair_tile::<D, I, false, true, false>,
            (false, true, true) => pair_tile::<D, I, false, true, true>,
            (true, false, _) => pair_tile::<D, I, true, false, false>,
            (false, false, _) => pair_tile::<D, I, false, false, false>,
        };

    let results: Vec<PairTile<D>> = tile_list
        .par_iter()
        .map(|&(bi, bj)| kernel(x, ids, inter, step_key, y, bi, bj))
        .collect();

    let mut out = PairwiseSums {
        drift: vec![[0.0; D]; p],
        noise: vec![[0.0; D]; p],
        frozen: vec![[0.0; D]; if with_frozen { p } else { 0 }],
    };
    for (&(bi, bj), tile) in tile_list.iter().zip(&results) {
        let (si, sj) = (bi * BLOCK, bj * BLOCK);
        let targets = [&mut out.drift, &mut out.noise, &mut out.frozen];
        for (target, (row, col)) in targets.into_iter().zip(tile.row.iter().zip(&tile.col)) {
            for (l, v) in row.iter().enumerate() {
                add(&mut target[si + l], v);
            }
            for (l, v) in col.iter().enumerate() {
                add(&mut target[sj + l], v);
            }
        }
    }
    out
}

/// Raw pair sums `sum_j b(x_i - x_j)` and `sum_j a(x_i - x_j)`.
pub struct MeanfieldSums<const D: usize> {
    pub drift: Vec<[f64; D]>,
    pub cov: Vec<[[f64; D]; D]>,
}

struct CovTile<const D: usize> {
    row_b: Vec<[f64; D]>,
    col_b: Vec<[f64; D]>,
    row_a: Vec<[[f64; D]; D]>,
    col_a: Vec<[[f64; D]; D]>,
}

pub fn meanfield_sums<const D: usize, I: PairInteraction<D>>(
    x: &[[f64; D]],
    inter: &I,
) -> MeanfieldSums<D> {
    let p = x.len();
    let anti = inter.antisymmetric();
    let tile_list = tiles(p);
    let results: Vec<CovTile<D>> = tile_list
        .par_iter()
        .map(|&(bi, bj)| {
            let ri = block_range(bi, p);
            let rj = block_range(bj, p);
            let mut t = CovTile {
                row_b: vec![[0.0; D]; ri.len()],
                col_b: vec![[0.0; D]; rj.len()],
                row_a: vec![[[0.0; D]; D]; ri.len()],
                col_a: vec![[[0.0; D]; D]; rj.len()],
            };
            let zero = [0.0f64; 3];
            for i in ri.clone() {
                let jstart = if bi == bj { i + 1 } else { rj.start };
                for j in jstart..rj.end {
                    let mut z = [0.0; D];
                    for k in 0..D {
                        z[k] = x[i][k] - x[j][k];
                    }
                    let (b, _) = inter.terms(&z, &zero[..inter.noise_dim()]);
                    let a = inter.covariance(&z);
                    let (li, lj) = (i - ri.start, j - rj.start);
                    add(&mut t.row_b[li], &b);
                    let (bn, an) = if anti {
                        let mut bn = b;
                        bn.iter_mut().for_each(|v| *v = -*v);
                        (bn, a)
                    } else {
                        let mut nz = z;
                        nz.iter_mut().for_each(|v| *v = -*v);
                        (inter.terms(&nz, &zero[..inter.noise_dim()]).0, inter.covariance(&nz))
                    };
                    add(&mut t.col_b[lj], &bn);
                    for r in 0..D {
                        add(&mut t.row_a[li][r], &a[r]);
                        add(&mut t.col_a[lj][r], &an[r]);
                    }
                }
            }
            t
        })
        .collect();

    let mut out = MeanfieldSums {
        drift: vec![[0.0; D]; p],
        cov: vec![[[0.0; D]; D]; p],
    };
    for (&(bi, bj), t) in tile_list.iter().zip(&results) {
        let (si, sj) = (bi * BLOCK, bj * BLOCK);
        for (l, v) in t.row_b.iter().enumerate() {
            add(&mut out.drift[si + l], v);
        }
        for (l, v) in t.col_b.iter().enumerate() {
            add(&mut out.drift[sj + l], v);
        }
        for (l, m) in t.row_a.iter().enumerate() {
            for r in 0..D {
                add(&mut out.cov[si + l][r], &m[r]);
            }
        }
        for (l, m) in t.col_a.iter().enumerate() {
            for r in 0..D {
                add(&mut out.cov[sj + l][r], &m[r]);
            }
        }
    }
    out
}
