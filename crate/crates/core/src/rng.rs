//! Counter-based random streams.
//!
//! Every trajectory owns an independent ChaCha stream addressed by
//! `(seed, purpose, epoch, trajectory)`, so results never depend on how
//! work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags separating otherwise identical stream coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Controlled,
    Reference,
    Evaluation,
    Pretrain,
    Prior,
    Phase,
    Other(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Controlled => 1,
            Purpose::Reference => 2,
            Purpose::Evaluation => 3,
            Purpose::Pretrain => 4,
            Purpose::Prior => 5,
            Purpose::Phase => 6,
            Purpose::Other(t) => 0x1000 + t,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub purpose: Purpose,
    pub epoch: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, purpose: Purpose, epoch: u64) -> Self {
        Self {
            seed,
            purpose,
            epoch,
        }
    }

    /// Generator for item `i` of this stream.
    pub fn rng(&self, i: u64) -> ChaCha8Rng {
        let key = splitmix(splitmix(splitmix(self.seed) ^ self.purpose.tag()) ^ self.epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(i);
        rng
    }
}

pub fn normal<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` rows of `dim` standard normals, row `i` drawn from `stream.rng(i)`.
pub fn normal_rows(stream: &NoiseStream, n: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mut rng = stream.rng(i as u64);
        out.extend((0..dim).map(|_| normal(&mut rng)));
    }
    out
}
