//! Reproducible per-chain random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// Mixes a master seed with a stream index (SplitMix64 finalizer), so each
/// subset chain gets an independent stream regardless of scheduling.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn chain_rng(master: u64, index: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, index))
}
