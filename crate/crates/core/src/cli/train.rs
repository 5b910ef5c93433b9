use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use log::{info, warn};

use super::{emit, CliError, TermSignals};
use crate::algos::{self, Algo, ModelConfig, Observer, OuterOpt, StepRecord, SyncRecord, TrainConfig};
use crate::client::Communicator;
use crate::config::Config;
use crate::types::Quantization;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Master address; falls back to the config file.
    #[arg(long, env = "CHURNCOMM_MASTER_ADDR")]
    pub master: Option<String>,
    #[arg(long, default_value = "diloco")]
    pub algo: Algo,
    #[arg(long, default_value_t = 1)]
    pub inner_steps: u32,
    /// Stop once the shared state reaches this revision.
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0 / 64.0)]
    pub inner_lr: f32,
    /// `nesterov` or `sgd`.
    #[arg(long, default_value = "nesterov")]
    pub outer: String,
    #[arg(long, default_value_t = 0.7)]
    pub outer_lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    /// Simulated compute per outer step, in milliseconds.
    #[arg(long, default_value_t = 0)]
    pub compute_ms: u64,
    #[arg(long, default_value = "none")]
    pub quant: Quantization,
    #[arg(long)]
    pub min_peers: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<u32>,
    /// Only print the final report.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let outer = match self.outer.as_str() {
            "sgd" => OuterOpt::Sgd { lr: self.outer_lr },
            "nesterov" => OuterOpt::Nesterov {
                lr: self.outer_lr,
                momentum: self.momentum,
            },
            other => return Err(CliError::Usage(format!("unknown outer optimizer {other:?}"))),
        };
        Ok(TrainConfig {
            algo: self.algo,
            steps: self.steps,
            inner_steps: self.inner_steps.max(1),
            inner_lr: self.inner_lr,
            outer,
            model: ModelConfig {
                dim: self.dim,
                batch: self.batch,
                seed: self.seed,
            },
            compute_delay: Duration::from_millis(self.compute_ms),
            quant: self.quant,
            ..Default::default()
        })
    }
}

struct Printer {
    quiet: bool,
    stop: Arc<AtomicBool>,
}

impl Observer for Printer {
    fn on_sync(&self, rec: &SyncRecord) {
        if !self.quiet {
            emit("sync", rec);
        }
    }

    fn on_step(&self, rec: &StepRecord) {
        if !self.quiet {
            emit("step", rec);
        }
    }

    fn should_stop(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

pub fn run(args: &TrainArgs, cfg: &Config, signals: TermSignals) -> Result<(), CliError> {
    let tcfg = args.train_config()?;
    let mut cc = cfg.comm_config();
    if let Some(m) = &args.master {
        cc.master_addr = m.clone();
    }
    if let Some(n) = args.min_peers {
        cc.min_peers = n;
    }
    if let Some(p) = args.pool_size {
        cc.pool_size = p;
    }

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        std::thread::Builder::new().name("signals".into()).spawn(move || {
            let sig = signals.wait();
            info!("signal {sig}: leaving after the current step");
            stop.store(true, Ordering::SeqCst);
            let sig = signals.wait();
            warn!("second signal {sig}: exiting now");
            std::process::exit(130);
        })?;
    }

    let comm = Communicator::connect(cc)?;
    emit(
        "joined",
        &serde_json::json!({ "peer_id": comm.peer_id(), "epoch": comm.epoch() }),
    );
    let obs = Printer {
        quiet: args.quiet,
        stop,
    };
    let result = algos::run(&comm, &tcfg, &obs);
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            comm.crash();
            return Err(e.into());
        }
    };
    emit("report", &report);
    comm.close();
    Ok(())
}
