//! Labelled, seeded random streams.
//!
//! Every consumer derives its own stream from `(label, seed)`, so adding a
//! draw in one place never perturbs another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit digest of a label and seed.
pub fn stream_key(label: &str, seed: u64) -> u64 {
    splitmix64(fnv1a(label.as_bytes(), FNV_OFFSET) ^ splitmix64(seed))
}

/// Deterministic random stream for `label` under `seed`.
pub fn rng_stream(label: &str, seed: u64) -> SimRng {
    let mut bytes = [0u8; 32];
    let mut k = stream_key(label, seed);
    for chunk in bytes.chunks_mut(8) {
        k = splitmix64(k);
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stream keyed by a label plus numeric coordinates, avoiding string formatting
/// on hot paths.
pub fn rng_for(label: &str, seed: u64, coords: &[u64]) -> SimRng {
    let mut k = stream_key(label, seed);
    for c in coords {
        k = splitmix64(k ^ splitmix64(*c));
    }
    ChaCha8Rng::seed_from_u64(k)
}

/// Map a key to a real in `[-1, 1)`.
pub fn unit_real(key: u64) -> f64 {
    let bits = splitmix64(key) >> 11;
    (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}
