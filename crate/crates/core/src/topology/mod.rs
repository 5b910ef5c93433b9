//! Ring-order optimization over measured p2p bandwidth.
//!
//! Directed costs are seconds per probe payload. The quick pass is a
//! multi-start nearest neighbour tour refined by Or-opt segment moves; the
//! exact pass is a Held-Karp dynamic program for small groups.

mod matrix;
mod solver;

pub use matrix::{CostMatrix, UNMEASURED};
pub use solver::{
    nearest_neighbor, nearest_neighbor_from, or_opt, solve_exact, solve_exact_cancellable, solve_quick,
    tour_cost, Tour, EXACT_MAX_N,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("need at least 2 peers to build a ring, got {0}")]
    TooFewNodes(usize),
    #[error("pair {from}->{to} has not been measured")]
    Unmeasured { from: usize, to: usize },
    #[error("exact solving is limited to {max} peers, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("cancelled")]
    Cancelled,
}

/// A ring over peer ids with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RingTopology {
    pub order: Vec<u64>,
    pub cost: f64,
}

impl Default for RingTopology {
    fn default() -> Self {
        Self {
            order: Vec::new(),
            cost: 0.0,
        }
    }
}

impl RingTopology {
    /// Ascending-id ring with unknown cost.
    pub fn ascending(mut ids: Vec<u64>) -> Self {
        ids.sort_unstable();
        Self {
            order: ids,
            cost: f64::NAN,
        }
    }

    pub fn from_tour(ids: &[u64], tour: &Tour) -> Self {
        Self {
            order: tour.order.iter().map(|&i| ids[i]).collect(),
            cost: tour.cost,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn rank_of(&self, peer: u64) -> Option<usize> {
        self.order.iter().position(|&p| p == peer)
    }

    pub fn successor(&self, rank: usize) -> u64 {
        self.order[(rank + 1) % self.order.len()]
    }

    pub fn predecessor(&self, rank: usize) -> u64 {
        let w = self.order.len();
        self.order[(rank + w - 1) % w]
    }

    /// Drops `peer`, keeping the relative order of everyone else.
    pub fn without(&self, peer: u64) -> Self {
        Self {
            order: self.order.iter().copied().filter(|&p| p != peer).collect(),
            cost: f64::NAN,
        }
    }
}
