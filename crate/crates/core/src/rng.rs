//! Seeded generators. Every random draw in the crate comes from a ChaCha
//! stream keyed by a master seed and a stream number, so results do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream number for a (kind, index) pair; kinds keep unrelated uses apart.
pub fn stream_id(kind: u32, index: u64) -> u64 {
    ((kind as u64) << 48) ^ index
}
