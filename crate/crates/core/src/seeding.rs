//! Deterministic derivation of independent RNG streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SenRng = ChaCha8Rng;

/// Mixes a base seed with a stream label (FNV-1a over the label, then
/// splitmix64), so that e.g. noise injection and training draw from
/// unrelated streams.
pub fn derive_seed(base: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: &str) -> SenRng {
    SenRng::seed_from_u64(derive_seed(base, stream))
}
