use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Linear regression `y = x . w* + noise` with per-peer data shards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 4096,
            batch: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    target: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
}

fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style scramble so neighbouring (shard, step) pairs decorrelate
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ToyModel {
    pub fn new(cfg: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, u64::MAX, 0));
        let scale = 1.0 / (cfg.dim as f64).sqrt();
        let target = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        Self {
            cfg,
            target,
            x: vec![0.0; cfg.dim * cfg.batch],
            y: vec![0.0; cfg.batch],
        }
    }

    pub fn init_params(&self) -> Vec<f32> {
        vec![0.0; self.cfg.dim]
    }

    fn load_batch(&mut self, shard: u64, step: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, shard, step));
        let d = self.cfg.dim;
        for b in 0..self.cfg.batch {
            let row = &mut self.x[b * d..(b + 1) * d];
            let mut dot = 0.0;
            for (xi, wi) in row.iter_mut().zip(&self.target) {
                *xi = rng.gen_range(-1.0..1.0);
                dot += *xi * wi;
            }
            self.y[b] = dot + 0.01 * rng.gen_range(-1.0..1.0);
        }
    }

    /// Mean-squared-error gradient at `params` on batch (`shard`, `step`),
    /// rounded to f32. Returns the batch loss. Evaluation order is fixed,
    /// so equal inputs give bit-equal outputs.
    pub fn gradient(&mut self, params: &[f64], shard: u64, step: u64, out: &mut [f32]) -> f64 {
        let d = self.cfg.dim;
        assert_eq!(params.len(), d);
        assert_eq!(out.len(), d);
        self.load_batch(shard, step);
        let mut acc = vec![0.0f64; d];
        let mut loss = 0.0;
        for b in 0..self.cfg.batch {
            let row = &self.x[b * d..(b + 1) * d];
            let pred: f64 = row.iter().zip(params).map(|(x, w)| x * w).sum();
            let r = pred - self.y[b];
            loss += 0.5 * r * r;
            for (a, x) in acc.iter_mut().zip(row) {
                *a += r * x;
            }
        }
        let inv = 1.0 / self.cfg.batch as f64;
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = (a * inv) as f32;
        }
        loss * inv
    }
}

/// Optimizer applied to the outer (shared) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OuterOpt {
    Sgd { lr: f32 },
    Nesterov { lr: f32, momentum: f32 },
}

impl OuterOpt {
    /// One step on `theta` with pseudo-gradient `delta`; `m` is the
    /// momentum buffer (untouched by plain SGD).
    pub fn step(&self, theta: &mut [f32], m: &mut [f32], delta: &[f32]) {
        match *self {
            OuterOpt::Sgd { lr } => {
                for (t, d) in theta.iter_mut().zip(delta) {
                    *t -= lr * d;
                }
            }
            OuterOpt::Nesterov { lr, momentum } => {
                for ((t, mi), d) in theta.iter_mut().zip(m.iter_mut()).zip(delta) {
                    *mi = momentum * *mi + d;
                    *t -= lr * (d + momentum * *mi);
                }
            }
        }
    }
}
