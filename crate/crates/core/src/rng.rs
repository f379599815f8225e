//! Hierarchically addressed random streams.
//!
//! A stream is a 64-bit seed plus a path of counters, e.g.
//! `(sample index, frame, point index)`. Each distinct path maps to its own
//! ChaCha8 key, so draws depend only on the address and never on the order
//! in which cells are evaluated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Vec2;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RandomStream {
    seed: u64,
    path: Vec<u64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn child(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self { seed: self.seed, path }
    }

    fn key(&self) -> [u8; 32] {
        let mut state = splitmix64(self.seed);
        for (depth, &p) in self.path.iter().enumerate() {
            state = splitmix64(state ^ splitmix64(p.wrapping_add((depth as u64 + 1) << 56)));
        }
        // Path length is folded in so that [] and [0] differ.
        state = splitmix64(state ^ self.path.len() as u64);
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_mut(8).enumerate() {
            state = splitmix64(state.wrapping_add(i as u64));
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        key
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }

    /// Two independent standard normal draws.
    pub fn normal2(&self) -> Vec2 {
        let mut rng = self.rng();
        Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    }

    pub fn uniform(&self) -> f64 {
        self.rng().random::<f64>()
    }

    pub fn coin(&self) -> bool {
        self.rng().random::<bool>()
    }
}
