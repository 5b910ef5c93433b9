use serde::Serialize;

use super::TopologyError;

/// Marker for a pair with no measurement. Solvers treat it as +inf.
pub const UNMEASURED: f64 = f64::INFINITY;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostMatrix {
    n: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    /// All off-diagonal pairs unmeasured.
    pub fn new(n: usize) -> Self {
        let mut cost = vec![UNMEASURED; n * n];
        for i in 0..n {
            cost[i * n + i] = 0.0;
        }
        Self { n, cost }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::new(n);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "cost matrix must be square");
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    m.set(i, j, c);
                }
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.cost[from * self.n + to]
    }

    pub fn set(&mut self, from: usize, to: usize, cost: f64) {
        assert!(from != to, "diagonal is fixed at zero");
        assert!(cost > 0.0 || cost == UNMEASURED, "costs must be positive");
        self.cost[from * self.n + to] = cost;
    }

    pub fn is_measured(&self, from: usize, to: usize) -> bool {
        self.get(from, to).is_finite()
    }

    /// First unmeasured directed pair, if any.
    pub fn check_complete(&self) -> Result<(), TopologyError> {
        for from in 0..self.n {
            for to in 0..self.n {
                if from != to && !self.is_measured(from, to) {
                    return Err(TopologyError::Unmeasured { from, to });
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.cost.chunks(self.n.max(1)).map(|r| r.to_vec()).collect()
    }
}
