//! Deterministic seed derivation for independent substreams.
//!
//! Every random draw in the pipeline flows from one configured seed through
//! `derive_seed(base, domain, item)`, so per-patient / per-cross-section
//! streams are independent of iteration order and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed for (`domain`, `item`) under `base`.
pub fn derive_seed(base: u64, domain: u64, item: u64) -> u64 {
    splitmix(splitmix(base ^ splitmix(domain)) ^ splitmix(item))
}

/// Deterministic stream for a derived seed.
pub fn seeded_rng(base: u64, domain: u64, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, domain, item))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = seeded_rng(1, 2, 3).gen();
        let b: f64 = seeded_rng(1, 2, 3).gen();
        let c: f64 = seeded_rng(1, 2, 4).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
