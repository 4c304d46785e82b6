//! Counter-style random streams keyed by tuples of integers.
//!
//! Every consumer derives its generator from `(seed, keys…)` plus a stream
//! index (typically a row), so results never depend on how work is split
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Domain tags so that different stages never share a stream.
pub mod domain {
    pub const SOURCE_PHASE: u64 = 1;
    pub const SHOT_NOISE: u64 = 2;
    pub const EFFICIENCY: u64 = 3;
    pub const TWIN_DISPLACEMENT: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const SWEEP_POINT: u64 = 6;
}

/// 256-bit key derived from a master seed and a key path.
pub fn derive_key(seed: u64, keys: &[u64]) -> [u8; 32] {
    let mut state = splitmix64(seed ^ 0x5143_5052_0000_0001);
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0x1234_5678)));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        state = splitmix64(state.wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    out
}

/// Generator for stream `stream` under `(seed, keys)`.
pub fn stream(seed: u64, keys: &[u64], stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(derive_key(seed, keys));
    rng.set_stream(stream);
    rng
}

/// A derived 64-bit seed, e.g. for one point of a parameter sweep.
pub fn sub_seed(seed: u64, keys: &[u64]) -> u64 {
    let key = derive_key(seed, keys);
    u64::from_le_bytes(key[..8].try_into().expect("eight bytes"))
}
