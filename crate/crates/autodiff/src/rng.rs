//! Counter-based deterministic random numbers.
//!
//! SplitMix64 drives everything. Uniforms take the top 53 bits of each output;
//! normal deviates are an Irwin-Hall sum (twelve uniforms minus six), which
//! has exactly unit variance and uses no transcendental functions, so every
//! stream is bit-identical across platforms and runs.

use crate::error::Result;
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of integers into a single seed. Order-sensitive, so
/// `seed_chain(&[a, b]) != seed_chain(&[b, a])` in general; used to derive
/// independent child seeds from a master seed plus context tags.
pub fn seed_chain(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        acc = mix64(acc.wrapping_mul(0x0000_0100_0000_01B3) ^ mix64(p.wrapping_add(GOLDEN)));
    }
    acc
}

/// A SplitMix64 stream.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { state: seed }
    }

    /// A stream for a sub-task, derived from this stream's seed path without
    /// disturbing it.
    pub fn derive(seed: u64, parts: &[u64]) -> Rng {
        let mut tags = Vec::with_capacity(parts.len() + 1);
        tags.push(seed);
        tags.extend_from_slice(parts);
        Rng::new(seed_chain(&tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Approximately standard normal: sum of twelve uniforms minus six.
    /// Mean 0 and variance exactly 1.
    pub fn normal(&mut self) -> f64 {
        let mut s = 0.0;
        for _ in 0..12 {
            s += self.uniform();
        }
        s - 6.0
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Uniformly chosen element of a non-empty slice.
    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// A tensor of independent draws from `N(0, 2 / fan_in)` — the usual scaling
/// for layers feeding rectified units.
pub fn randn_init(dims: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    let sigma = (2.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.normal() * sigma).collect();
    Tensor::from_vec(dims, data)
}
