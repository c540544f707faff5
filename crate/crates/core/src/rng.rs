//! Counter-addressed random streams.
//!
//! Every random draw is keyed by `(seed, purpose, step, index)` so results do
//! not depend on the order in which particles or paths are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nalgebra::DVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    ForwardNoise = 1,
    TerminalUpdate = 2,
    ReverseNoise = 3,
    InitialSpread = 4,
    PathNoise = 5,
    User = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for one `(purpose, step, index)` cell.
    pub fn rng(&self, purpose: Purpose, step: u64, index: u64) -> ChaCha8Rng {
        let mut key = splitmix(self.seed ^ splitmix(purpose as u64));
        key = splitmix(key ^ step);
        key = splitmix(key ^ index.rotate_left(32));
        ChaCha8Rng::seed_from_u64(key)
    }

    pub fn normal_vec(&self, purpose: Purpose, step: u64, index: u64, dim: usize) -> DVector<f64> {
        let mut rng = self.rng(purpose, step, index);
        DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng))
    }
}
