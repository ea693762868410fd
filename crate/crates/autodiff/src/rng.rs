//! Labeled deterministic RNG streams derived from one run seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness consumers. Adding a stream never perturbs the
/// draws of existing ones.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 0,
    DataOrder = 1,
    BrandoNoise = 2,
    WorldNoise = 3,
    Gumbel = 4,
    Forge = 5,
    Eval = 6,
}

pub fn seeded_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
