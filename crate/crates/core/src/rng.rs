//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from
//! the run seed, so adding draws in one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const VAE_INIT: u64 = 1;
pub const VAE_SHUFFLE: u64 = 2;
pub const VAE_NOISE: u64 = 3;
pub const VAE_SUBSET: u64 = 4;
pub const GCN_INIT: u64 = 5;
pub const PIXEL_SAMPLING: u64 = 6;
pub const KMEANS: u64 = 7;
pub const SYNTH: u64 = 8;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
