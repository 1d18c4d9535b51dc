//! Seeded randomness.
//!
//! Every consumer draws from a SplitMix64 generator (64-bit state, Steele et
//! al. mixing function). A run seed is split into independent streams by
//! purpose: the stream seed is `seed ^ (purpose_tag * 0x9E3779B97F4A7C15)`,
//! so adding draws to one consumer never shifts another. Gaussian samples use
//! `rand_distr::StandardNormal` (ziggurat).

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Data,
    Rhs,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Data => 3,
            Stream::Rhs => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rng(SplitMix64);

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mixed = seed ^ stream.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Rng(SplitMix64::seed_from_u64(mixed))
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }
}
