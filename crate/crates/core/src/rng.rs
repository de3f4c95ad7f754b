//! Seeded, platform-independent random streams.
//!
//! All sampling goes through ChaCha8 seeded from a 64-bit value, and integer
//! draws use `u64` ranges so results do not depend on pointer width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a over `bytes`, mixed with `seed`. Stable across platforms and runs.
pub fn stable_hash(bytes: &[u8], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a keyed sub-task, e.g. `(global seed, image_id)`.
pub fn derived_rng(seed: u64, key: &str) -> StreamRng {
    rng_from_seed(stable_hash(key.as_bytes(), seed))
}

/// Uniform integer in `lo..=hi` (inclusive). Panics if `lo > hi`.
pub fn uniform_inclusive(rng: &mut StreamRng, lo: usize, hi: usize) -> usize {
    assert!(lo <= hi, "empty range {lo}..={hi}");
    rng.random_range(lo as u64..=hi as u64) as usize
}

/// Fisher-Yates shuffle driven by [`uniform_inclusive`].
pub fn shuffle<T>(rng: &mut StreamRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_inclusive(rng, 0, i);
        items.swap(i, j);
    }
}

/// `k` distinct indices from `0..n`, in draw order.
pub fn choose_without_replacement(rng: &mut StreamRng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = uniform_inclusive(rng, i, n - 1);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
