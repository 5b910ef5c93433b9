use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use super::{CostMatrix, TopologyError};

/// Largest group the exact solver accepts.
pub const EXACT_MAX_N: usize = 13;

/// A directed Hamiltonian cycle over matrix indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Tour {
    pub order: Vec<usize>,
    pub cost: f64,
}

pub fn tour_cost(m: &CostMatrix, order: &[usize]) -> f64 {
    let n = order.len();
    if n < 2 {
        return 0.0;
    }
    (0..n).map(|k| m.get(order[k], order[(k + 1) % n])).sum()
}

fn check_input(m: &CostMatrix) -> Result<(), TopologyError> {
    if m.n() < 2 {
        return Err(TopologyError::TooFewNodes(m.n()));
    }
    m.check_complete()
}

/// Greedy tour from a fixed start. Ties go to the lowest index.
pub fn nearest_neighbor_from(m: &CostMatrix, start: usize) -> Tour {
    let n = m.n();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    order.push(cur);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_cost = f64::INFINITY;
        for (j, &seen) in visited.iter().enumerate() {
            if !seen && (best == usize::MAX || m.get(cur, j) < best_cost) {
                best = j;
                best_cost = m.get(cur, j);
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    let cost = tour_cost(m, &order);
    Tour { order, cost }
}

/// Best nearest-neighbour tour over every start node.
pub fn nearest_neighbor(m: &CostMatrix) -> Result<Tour, TopologyError> {
    check_input(m)?;
    let mut best: Option<Tour> = None;
    for start in 0..m.n() {
        let t = nearest_neighbor_from(m, start);
        if best.as_ref().map_or(true, |b| t.cost < b.cost) {
            best = Some(t);
        }
    }
    Ok(best.expect("n >= 2"))
}

/// Or-opt local search: relocate segments of 1 to 3 consecutive nodes to
/// another position without reversing them. Applies the best improving move
/// per pass until none is left or `deadline` passes.
pub fn or_opt(m: &CostMatrix, tour: &mut Tour, deadline: Option<Instant>) {
    let n = tour.order.len();
    if n < 4 {
        return;
    }
    let mut rest = Vec::with_capacity(n);
    loop {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return;
        }
        // (delta, seg_start, seg_len, insertion slot in `rest`)
        let mut best: Option<(f64, usize, usize, usize)> = None;
        let t = &tour.order;
        for len in 1..=3usize {
            if len + 2 > n {
                break;
            }
            for i in 0..n {
                let s0 = t[i];
                let s_last = t[(i + len - 1) % n];
                let prev = t[(i + n - 1) % n];
                let next = t[(i + len) % n];
                let removal = m.get(prev, s0) + m.get(s_last, next) - m.get(prev, next);
                // rest runs next .. prev; its closing edge prev->next is where
                // the segment came from, so it is skipped
                let rest_len = n - len;
                for k in 0..rest_len - 1 {
                    let a = t[(i + len + k) % n];
                    let b = t[(i + len + k + 1) % n];
                    let insert = m.get(a, s0) + m.get(s_last, b) - m.get(a, b);
                    let delta = insert - removal;
                    if delta < 0.0 && best.map_or(true, |(d, ..)| delta < d) {
                        best = Some((delta, i, len, k));
                    }
                }
            }
        }
        let Some((_, i, len, k)) = best else {
            return;
        };
        rest.clear();
        let t = &tour.order;
        let rest_len = n - len;
        for j in 0..rest_len {
            rest.push(t[(i + len + j) % n]);
        }
        let mut candidate = Vec::with_capacity(n);
        candidate.extend_from_slice(&rest[..=k]);
        for j in 0..len {
            candidate.push(t[(i + j) % n]);
        }
        candidate.extend_from_slice(&rest[k + 1..]);
        let cost = tour_cost(m, &candidate);
        // rounding can make a tiny negative delta a non-improvement
        if cost >= tour.cost {
            return;
        }
        debug_assert!(is_permutation(&candidate, n));
        tour.order = candidate;
        tour.cost = cost;
    }
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n && order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Quick pass: multi-start nearest neighbour followed by Or-opt.
pub fn solve_quick(m: &CostMatrix, time_limit: Duration) -> Result<Tour, TopologyError> {
    let deadline = Instant::now() + time_limit;
    let mut tour = nearest_neighbor(m)?;
    or_opt(m, &mut tour, Some(deadline));
    Ok(tour)
}

pub fn solve_exact(m: &CostMatrix) -> Result<Tour, TopologyError> {
    solve_exact_cancellable(m, &AtomicBool::new(false))
}

/// Held-Karp over subsets of nodes 1..n, tours anchored at node 0.
pub fn solve_exact_cancellable(m: &CostMatrix, cancel: &AtomicBool) -> Result<Tour, TopologyError> {
    let n = m.n();
    if n > EXACT_MAX_N {
        return Err(TopologyError::TooLarge { n, max: EXACT_MAX_N });
    }
    check_input(m)?;
    let k = n - 1;
    let full = (1usize << k) - 1;
    // dp[mask * k + j]: cheapest path 0 -> ... -> node j+1 visiting mask
    let mut dp = vec![f64::INFINITY; (1 << k) * k];
    let mut parent = vec![u8::MAX; (1 << k) * k];
    for j in 0..k {
        dp[(1 << j) * k + j] = m.get(0, j + 1);
    }
    for mask in 1..=full {
        if mask & 0xff == 0 && cancel.load(Ordering::Relaxed) {
            return Err(TopologyError::Cancelled);
        }
        for j in 0..k {
            if mask & (1 << j) == 0 {
                continue;
            }
            let cur = dp[mask * k + j];
            if !cur.is_finite() {
                continue;
            }
            for nx in 0..k {
                if mask & (1 << nx) != 0 {
                    continue;
                }
                let nmask = mask | (1 << nx);
                let cand = cur + m.get(j + 1, nx + 1);
                let slot = nmask * k + nx;
                if cand < dp[slot] {
                    dp[slot] = cand;
                    parent[slot] = j as u8;
                }
            }
        }
    }
    let mut best_j = 0;
    let mut best = f64::INFINITY;
    for j in 0..k {
        let c = dp[full * k + j] + m.get(j + 1, 0);
        if c < best {
            best = c;
            best_j = j;
        }
    }
    let mut rev = Vec::with_capacity(n);
    let mut mask = full;
    let mut j = best_j;
    loop {
        rev.push(j + 1);
        let p = parent[mask * k + j];
        mask &= !(1 << j);
        if p == u8::MAX {
            break;
        }
        j = p as usize;
    }
    rev.push(0);
    rev.reverse();
    let cost = tour_cost(m, &rev);
    Ok(Tour { order: rev, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(n: usize, rng: &mut impl Rng) -> CostMatrix {
        let mut m = CostMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m.set(i, j, rng.gen_range(1.0..100.0));
                }
            }
        }
        m
    }

    // exhaustive enumeration of all (n-1)! directed tours anchored at 0
    fn brute_force(m: &CostMatrix) -> f64 {
        fn rec(m: &CostMatrix, path: &mut Vec<usize>, used: &mut Vec<bool>, best: &mut f64) {
            let n = m.n();
            if path.len() == n {
                *best = best.min(tour_cost(m, path));
                return;
            }
            for j in 1..n {
                if !used[j] {
                    used[j] = true;
                    path.push(j);
                    rec(m, path, used, best);
                    path.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; m.n()];
        used[0] = true;
        rec(m, &mut vec![0], &mut used, &mut best);
        best
    }

    #[test]
    fn two_nodes_unique_cycle() {
        let m = CostMatrix::from_rows(&[vec![0.0, 3.0], vec![5.0, 0.0]]);
        let q = solve_quick(&m, Duration::from_millis(250)).unwrap();
        assert_eq!(q.cost, 8.0);
        assert_eq!(solve_exact(&m).unwrap().cost, 8.0);
    }

    #[test]
    fn too_few_and_unmeasured_rejected() {
        assert_eq!(
            solve_quick(&CostMatrix::new(1), Duration::ZERO),
            Err(TopologyError::TooFewNodes(1))
        );
        let mut m = CostMatrix::new(3);
        m.set(0, 1, 1.0);
        assert!(matches!(solve_quick(&m, Duration::ZERO), Err(TopologyError::Unmeasured { .. })));
        assert!(matches!(
            solve_exact(&CostMatrix::new(14)),
            Err(TopologyError::TooLarge { .. })
        ));
    }

    #[test]
    fn symmetric_square_optimum() {
        // four corners of a unit square: perimeter 4 beats both diagonals
        let d = 2f64.sqrt();
        let m = CostMatrix::from_rows(&[
            vec![0.0, 1.0, d, 1.0],
            vec![1.0, 0.0, 1.0, d],
            vec![d, 1.0, 0.0, 1.0],
            vec![1.0, d, 1.0, 0.0],
        ]);
        let q = solve_quick(&m, Duration::from_millis(250)).unwrap();
        assert!((q.cost - 4.0).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_brute_force_n5() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = random_matrix(5, &mut rng);
            let e = solve_exact(&m).unwrap();
            assert!((e.cost - brute_force(&m)).abs() < 1e-9);
            assert!((e.cost - tour_cost(&m, &e.order)).abs() < 1e-9);
        }
    }

    #[test]
    fn quick_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(9, &mut rng);
        let a = solve_quick(&m, Duration::from_secs(1)).unwrap();
        let b = solve_quick(&m, Duration::from_secs(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cancel_stops_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(12, &mut rng);
        assert_eq!(
            solve_exact_cancellable(&m, &AtomicBool::new(true)),
            Err(TopologyError::Cancelled)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pipeline_is_monotone(seed in any::<u64>(), n in 2usize..=9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(n, &mut rng);
            let nn = nearest_neighbor(&m).unwrap();
            let q = solve_quick(&m, Duration::from_secs(1)).unwrap();
            let e = solve_exact(&m).unwrap();
            prop_assert!(is_permutation(&nn.order, n));
            prop_assert!(is_permutation(&q.order, n));
            prop_assert!(is_permutation(&e.order, n));
            prop_assert!(q.cost <= nn.cost);
            prop_assert!(e.cost <= q.cost + 1e-9);
            prop_assert!((q.cost - tour_cost(&m, &q.order)).abs() < 1e-9);
        }

        #[test]
        fn or_opt_never_increases_cost(seed in any::<u64>(), n in 4usize..=12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(n, &mut rng);
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let cost = tour_cost(&m, &order);
            let mut t = Tour { order, cost };
            or_opt(&m, &mut t, None);
            prop_assert!(t.cost <= cost);
            prop_assert!(is_permutation(&t.order, n));
        }
    }
}
