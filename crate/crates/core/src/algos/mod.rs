//! Reference training loops: DDP, DiLoCo and async DiLoCo over a toy
//! linear-regression model.

mod loops;
mod model;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{Communicator, SyncOutcome};
use crate::types::{Quantization, SyncStrategy};

pub use loops::{run, run_async_diloco, run_ddp, run_diloco};
pub use model::{ModelConfig, OuterOpt, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Ddp,
    Diloco,
    AsyncDiloco,
}

impl std::str::FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddp" => Ok(Algo::Ddp),
            "diloco" => Ok(Algo::Diloco),
            "async-diloco" => Ok(Algo::AsyncDiloco),
            other => Err(format!("unknown algorithm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algo,
    /// Stop once the shared state reaches this revision.
    pub steps: u64,
    pub inner_steps: u32,
    /// Inner SGD step size. A power of two keeps DDP and DiLoCo(H=1)
    /// bit-identical.
    pub inner_lr: f32,
    pub outer: OuterOpt,
    pub model: ModelConfig,
    /// Simulated extra compute per outer step.
    pub compute_delay: Duration,
    pub quant: Quantization,
    pub tag: u64,
    /// Attempts at a failing shared-state sync before giving up.
    pub sync_retries: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Ddp,
            steps: 50,
            inner_steps: 1,
            inner_lr: 1.0 / 64.0,
            outer: OuterOpt::Nesterov {
                lr: 0.7,
                momentum: 0.9,
            },
            model: ModelConfig::default(),
            compute_delay: Duration::ZERO,
            quant: Quantization::None,
            tag: 0,
            sync_retries: 20,
        }
    }
}

/// State at the end of one outer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub iteration: u64,
    /// Shared-state revision after the step.
    pub revision: u64,
    pub world: usize,
    /// Fingerprint of the whole shared state.
    pub digest: u64,
    /// simplehash of the parameter bytes alone.
    pub theta_hash: u64,
    pub loss: f64,
    /// Whether an outer update was applied this step.
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncRecord {
    pub iteration: u64,
    pub revision: u64,
    pub strategy: SyncStrategy,
    pub world: usize,
    pub digest: u64,
    pub outcome: SyncOutcome,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub peer_id: u64,
    pub steps: Vec<StepRecord>,
    pub syncs: Vec<SyncRecord>,
    pub reduces: u64,
    pub aborts: u64,
    pub final_revision: u64,
    #[serde(skip)]
    pub params: Vec<f32>,
    pub wall_s: f64,
}

/// Callbacks for harnesses. All methods default to doing nothing.
pub trait Observer {
    /// Called at the top of every outer iteration.
    fn before_step(&self, _comm: &Communicator, _revision: u64) {}
    fn on_sync(&self, _rec: &SyncRecord) {}
    fn on_step(&self, _rec: &StepRecord) {}
    /// Checked before each outer iteration; true ends the loop early.
    fn should_stop(&self) -> bool {
        false
    }
}

#[derive(Debug)]
pub struct NoObserver;

impl Observer for NoObserver {}
