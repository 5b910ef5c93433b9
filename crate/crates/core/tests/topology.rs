mod common;

use churncomm::topology::{solve_exact, solve_quick, CostMatrix, RingTopology};
use common::scenarios::{atsp, brute_force, random_costs};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Duration;

#[test]
fn solvers_against_brute_force_and_greedy() {
    println!("{}", atsp(200, 1).unwrap());
}

#[test]
fn quick_pass_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 3..=12 {
        let m = CostMatrix::from_rows(&random_costs(n, &mut rng));
        let a = solve_quick(&m, Duration::from_secs(1)).unwrap();
        let b = solve_quick(&m, Duration::from_secs(1)).unwrap();
        assert_eq!(a.order, b.order);
    }
}

#[test]
fn ring_keeps_tour_order() {
    let rows = vec![
        vec![0.0, 1.0, 9.0, 9.0],
        vec![9.0, 0.0, 9.0, 1.0],
        vec![1.0, 9.0, 0.0, 9.0],
        vec![9.0, 9.0, 1.0, 0.0],
    ];
    let t = solve_exact(&CostMatrix::from_rows(&rows)).unwrap();
    assert_eq!(t.cost, 4.0);
    let ring = RingTopology::from_tour(&[10, 20, 30, 40], &t);
    let pos = ring.order.iter().position(|&p| p == 10).unwrap();
    let rotated: Vec<u64> = (0..4).map(|k| ring.order[(pos + k) % 4]).collect();
    assert_eq!(rotated, vec![10, 20, 40, 30]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_is_optimal(seed in any::<u64>(), n in 2usize..=8) {
        let rows = random_costs(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let e = solve_exact(&CostMatrix::from_rows(&rows)).unwrap();
        let opt = brute_force(&rows);
        prop_assert!((e.cost - opt).abs() <= 1e-9 * opt);
    }
}
