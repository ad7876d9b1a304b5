//! Seeded, stream-separated random numbers.
//!
//! Every stochastic consumer (initialization, data generation, shuffling,
//! dropout) draws from its own [`RngStream`] so that adding draws in one place
//! never perturbs another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Well-known stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA_CLEAN: u64 = 2;
    pub const DATA_CORRUPT: u64 = 3;
    pub const DATA_SPLIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const DROPOUT: u64 = 7;
    pub const INFERENCE: u64 = 8;
    pub const BENCH: u64 = 9;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 64-bit draws consumed so far.
    pub fn draw_index(&self) -> u64 {
        (self.rng.get_word_pos() / 2) as u64
    }

    /// The 64-bit draw at `index`, independent of this stream's position.
    pub fn value_at(&self, index: u64) -> u64 {
        let mut rng = self.rng.clone();
        rng.set_word_pos(index as u128 * 2);
        rng.next_u64()
    }

    /// Independent child stream, deterministic in `(seed, stream, child)`.
    pub fn fork(&self, child: u64) -> Self {
        Self::new(splitmix(self.seed ^ splitmix(child.wrapping_add(0x9e37))), self.stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer, used to derive seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
