//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator. Sub-streams are derived from the
//! parent's *seed* (never its position) through SplitMix64 mixing, so drawing
//! from one purpose never shifts the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Dropout,
    Augment,
    Sampling,
    Shuffle,
    Data,
    Pairing,
    Probe,
    Eval,
    FewShot,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x494e4954,
            Purpose::Dropout => 0x44524f50,
            Purpose::Augment => 0x4155474d,
            Purpose::Sampling => 0x53414d50,
            Purpose::Shuffle => 0x53485546,
            Purpose::Data => 0x44415441,
            Purpose::Pairing => 0x50414952,
            Purpose::Probe => 0x50524f42,
            Purpose::Eval => 0x4556414c,
            Purpose::FewShot => 0x46455753,
        }
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for `purpose`, indexed by `index`
    /// (sample id, step number, branch, ...).
    pub fn substream(&self, purpose: Purpose, index: u64) -> RngStream {
        let h = splitmix64(self.seed ^ splitmix64(purpose.tag()));
        RngStream::new(splitmix64(h ^ splitmix64(index.wrapping_add(0x5851_f42d))))
    }

    /// Child stream keyed by an arbitrary label.
    pub fn child(&self, label: u64) -> RngStream {
        RngStream::new(splitmix64(splitmix64(self.seed) ^ label))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` for an empty interval.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        if hi > lo {
            lo + (hi - lo) * u
        } else {
            lo
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `[0, n)`, in draw order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        let count = count.min(n);
        for i in 0..count {
            let j = i + self.below(n - i);
            all.swap(i, j);
        }
        all.truncate(count);
        all
    }
}
