//! Seed-stream derivation. Every random draw in a run flows from one master
//! seed through named sub-streams, so stages can be re-run in isolation and
//! repeated runs are bit-identical.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(init: u64, bytes: &[u8]) -> u64 {
    let mut h = init;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// RNG for a named stream of the given master seed.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    substream(seed, label, &[])
}

/// RNG for a named stream further keyed by integer parts (sample index,
/// transform index, ...). Independent of processing order.
pub fn substream(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut h = fnv1a(FNV_OFFSET, label.as_bytes());
    for p in parts {
        h = fnv1a(h, &p.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Standard normal draw via Box-Muller; pinned here so noise generation does
/// not depend on distribution-crate internals.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
