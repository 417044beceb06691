//! Seeded random streams.
//!
//! Every generator is a xoshiro256++ seeded through SplitMix64
//! (`Xoshiro256PlusPlus::seed_from_u64`). Independent streams are derived by
//! folding a list of tags (epoch, batch index, record index, ...) into the
//! base seed with the SplitMix64 finalizer, so a stream depends only on
//! `(seed, tags)` and never on how many draws other streams made.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    seeded(derive_seed(seed, tags))
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, &[1, 2]), |r, _: u64| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, &[1, 2]), |r, _: u64| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, &[2, 1]), |r, _: u64| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generator_output_is_pinned() {
        // xoshiro256++ seeded via SplitMix64 from 0; guards against a silent
        // algorithm change in the dependency.
        let mut r = seeded(0);
        let first: u64 = r.random();
        assert_eq!(first, 0x53175d61490b23df);
    }
}
