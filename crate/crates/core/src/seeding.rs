//! Seed derivation so independent consumers of one user seed get
//! decorrelated, order-independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `base` and `stream`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Merges two lists so that every prefix of the result holds the two groups
/// in (rounded) proportion to their sizes.
pub fn proportional_interleave<T>(a: Vec<T>, b: Vec<T>) -> Vec<T> {
    let total = a.len() + b.len();
    let n_a = a.len();
    let mut a = a.into_iter();
    let mut b = b.into_iter();
    let mut taken_a = 0usize;
    let mut out = Vec::with_capacity(total);
    for k in 0..total {
        // Round-half-up of (k + 1) * n_a / total in integer arithmetic.
        let target = (2 * (k + 1) * n_a + total) / (2 * total);
        if taken_a < target {
            out.extend(a.next());
            taken_a += 1;
        } else {
            out.extend(b.next());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn interleave_keeps_everything_and_spreads_minority() {
        let a: Vec<u32> = (0..20).collect();
        let b: Vec<u32> = (100..180).collect();
        let merged = proportional_interleave(a, b);
        assert_eq!(merged.len(), 100);
        for prefix in [10, 25, 50, 100] {
            let minority = merged[..prefix].iter().filter(|&&v| v < 100).count();
            assert!((minority as f64 - prefix as f64 * 0.2).abs() <= 1.0, "{prefix}: {minority}");
        }
    }
}
