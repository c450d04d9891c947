//! Seeded, splittable randomness.
//!
//! Every random draw in the library goes through a [`Prng`]. Substreams are
//! derived from the parent seed and a name, never from the parent's current
//! position, so adding draws in one component does not perturb another.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::DenseMatrix;

#[derive(Debug, Clone)]
pub struct Prng {
    seed: u64,
    rng: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Stream positioned at `counter` words past the start of `seed`.
    pub fn at(seed: u64, counter: u128) -> Self {
        let mut p = Self::new(seed);
        p.rng.set_word_pos(counter);
        p
    }

    /// Independent child stream identified by `name`.
    pub fn split(&self, name: &str) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(fnv1a(name.as_bytes()))))
    }

    /// Independent child stream identified by `name` and an index (iteration, fold, repeat).
    pub fn substream(&self, name: &str, index: u64) -> Self {
        let base = splitmix64(self.seed ^ splitmix64(fnv1a(name.as_bytes())));
        Self::new(splitmix64(base ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| self.normal()).collect();
        DenseMatrix::from_raw(rows, cols, data)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `k` distinct indices from `0..n` (all of them, shuffled, when `k >= n`).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        if k >= n {
            let mut all: Vec<usize> = (0..n).collect();
            self.shuffle(&mut all);
            return all;
        }
        rand::seq::index::sample(&mut self.rng, n, k).into_vec()
    }
}
