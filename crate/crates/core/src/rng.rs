//! Counter-based random streams.
//!
//! Every random draw in the laboratory is a pure function of a 64-bit key
//! derived from the master seed, a purpose tag and a tuple of indices
//! (step, particle ids, replica, ...). Nothing is drawn from a shared
//! sequential generator, so results do not depend on evaluation order or on
//! how work is split across threads.

use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Domain separation tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    PairNoise = 2,
    ParticleNoise = 3,
    Replica = 4,
    Bootstrap = 5,
    Synthetic = 6,
    InnerNoise = 7,
}

/// Stable key for `(master, purpose, indices...)`.
pub fn derive_key(master: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut h = mix64(master ^ (purpose as u64).wrapping_mul(GOLDEN));
    for &i in indices {
        h = mix64(h.wrapping_add(GOLDEN) ^ i.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    h
}

/// Key of the shared Brownian increment of an unordered particle pair.
///
/// Not mixed here: `CounterRng` mixes on every draw, so the pair index only
/// needs to land on a distinct, well spread counter offset.
#[inline(always)]
pub fn pair_key(step_key: u64, id_a: u64, id_b: u64) -> u64 {
    let (lo, hi) = if id_a < id_b { (id_a, id_b) } else { (id_b, id_a) };
    step_key.wrapping_add((lo << 32 | hi).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

const ZIG_R: f64 = 3.654_152_885_361_009;

/// Layer edges `ZIG_X` and densities `ZIG_F = exp(-x^2/2)`, with
/// `ZIG_X[0] = V / f(R)`, `ZIG_X[1] = R` and `ZIG_X[256] = 0`.
#[path = "zig_tables.rs"]
mod tables;
use tables::{ZIG_F, ZIG_X};

fn open01(w: u64) -> f64 {
    ((w >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// A stream of 64-bit words `mix64(key + n * GOLDEN)`, n = 1, 2, ...
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Standard normal draw (256-layer ziggurat).
    #[inline(always)]
    pub fn normal(&mut self) -> f64 {
        loop {
            let bits = self.next_u64();
            let i = (bits & 0xff) as usize;
            let u = ((bits >> 11) as i64) as f64 * (1.0 / 4_503_599_627_370_496.0) - 1.0;
            let x = u * ZIG_X[i];
            if x.abs() < ZIG_X[i + 1] {
                return x;
            }
            if let Some(x) = self.normal_slow(i, x) {
                return x;
            }
        }
    }

    #[cold]
    fn normal_slow(&mut self, i: usize, x: f64) -> Option<f64> {
        if i == 0 {
            loop {
                let a = -open01(self.next_u64()).ln() / ZIG_R;
                let b = -open01(self.next_u64()).ln();
                if 2.0 * b > a * a {
                    return Some(if x < 0.0 { -(ZIG_R + a) } else { ZIG_R + a });
                }
            }
        }
        let y = ZIG_F[i + 1] + self.uniform() * (ZIG_F[i] - ZIG_F[i + 1]);
        (y < (-0.5 * x * x).exp()).then_some(x)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn next_bit(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

impl RngCore for CounterRng {
    #[inline(always)]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline(always)]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let w = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}
