mod common;

use churncomm::sharedstate::simplehash;
use common::scenarios::{hash_exhaustive, hash_random, oracle_simplehash};
use proptest::prelude::*;

#[test]
fn every_short_length_and_worker_count_agrees() {
    hash_exhaustive().unwrap();
}

#[test]
fn random_buffers_agree() {
    hash_random(1000, 1 << 20, 5).unwrap();
}

#[test]
fn empty_buffer_is_the_folded_basis() {
    assert_eq!(simplehash(&[]), oracle_simplehash(&[]));
    assert_ne!(simplehash(&[]), 0);
}

#[test]
fn one_bit_flips_change_the_hash() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut same = 0;
    for _ in 0..10_000 {
        let len = rng.gen_range(1..=4097);
        let mut b: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let h = simplehash(&b);
        let bit = rng.gen_range(0..len * 8);
        b[bit / 8] ^= 1 << (bit % 8);
        same += (simplehash(&b) == h) as u32;
    }
    // at least 99.9% of flips must be seen
    assert!(same <= 10, "{same} flips went unnoticed");
}

proptest! {
    #[test]
    fn matches_the_definition(b in proptest::collection::vec(any::<u8>(), 0..20_000)) {
        prop_assert_eq!(simplehash(&b), oracle_simplehash(&b));
    }

    #[test]
    fn trailing_zero_bytes_are_not_ignored(b in proptest::collection::vec(any::<u8>(), 0..300)) {
        let mut z = b.clone();
        z.push(0);
        prop_assert_ne!(simplehash(&b), simplehash(&z));
    }
}
