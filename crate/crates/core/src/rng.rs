//! Seed plumbing. Every random choice in the crate flows from an explicit
//! `u64` seed through ChaCha streams so any run can be replayed bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and an index (used for
/// per-item shot sampling, per-layer init streams, and the like).
pub fn derived(seed: u64, stream: u64) -> ChaCha8Rng {
    seeded(mix(seed, stream))
}

/// splitmix64-style mixing of a seed with a stream index.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample `k` distinct indices out of `0..n` (partial Fisher–Yates).
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    use rand::Rng;
    assert!(k <= n, "cannot sample {k} of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
