//! Seeded random streams.
//!
//! Every stochastic subsystem draws from its own ChaCha8 stream derived from
//! the run seed, so toggling one subsystem never shifts another's draws. The
//! generators serialize with their position, which is what lets a snapshot
//! resume bit-exactly in a fresh process.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimRng(ChaCha8Rng);

impl SimRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self(inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Exponential inter-arrival time with the given rate (events per second).
    pub fn exponential(&mut self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return f64::INFINITY;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        -(1.0 - self.uniform()).ln() / rate
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// The per-subsystem streams of one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreams {
    pub clock: SimRng,
    pub bus: SimRng,
    pub flow: SimRng,
    pub adversary: SimRng,
    pub twin: SimRng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            clock: SimRng::new(seed, 1),
            bus: SimRng::new(seed, 2),
            flow: SimRng::new(seed, 3),
            adversary: SimRng::new(seed, 4),
            twin: SimRng::new(seed, 5),
        }
    }
}
