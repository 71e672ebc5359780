//! Deterministic, splittable random streams.
//!
//! Every consumer derives its generator from a `(seed, stream)` pair, so work
//! items (e.g. training pairs) can be produced in any order or on any thread
//! and still see identical random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-based ChaCha generator keyed by `seed`, on the independent
/// sub-stream `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = (0..8).map({
            let mut r = stream_rng(42, 3);
            move |_| r.gen()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = stream_rng(42, 3);
            move |_| r.gen()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_distinct() {
        let a: u64 = stream_rng(42, 0).gen();
        let b: u64 = stream_rng(42, 1).gen();
        let c: u64 = stream_rng(43, 0).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
