//! Seed bookkeeping.
//!
//! Every randomized operation in this crate is a pure function of
//! `(inputs, seed)`. A single user-facing seed is expanded into named
//! sub-streams (data, parameter init, init noise, rollout noise, ...) so that
//! changing how one consumer draws does not shift any other consumer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable 64-bit FNV-1a hash. `std::hash` is not guaranteed stable across
/// releases, so seeds derive through this instead.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent seed for a named sub-stream.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + name.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    fnv1a(&buf)
}

/// RNG for a named sub-stream of `seed`.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(substream(seed, name))
}

/// RNG for the `index`-th item of a named sub-stream. ChaCha streams are
/// mutually independent, which lets callers regenerate per-item draws
/// (per-trajectory, per-diffusion-step) without storing them.
pub fn indexed_rng(seed: u64, name: &str, index: u64) -> ChaCha12Rng {
    let mut rng = stream_rng(seed, name);
    rng.set_stream(index);
    rng
}
