//! The `churncomm` command line: `master`, `bench`, `chaos` and `train`.
//! Reports go to stdout as JSON, logs to stderr as JSON lines.

pub mod bench;
pub mod chaos;
mod master;
mod train;

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::error;
use serde::Serialize;
use thiserror::Error;

use crate::client::CommError;
use crate::config::{Config, ConfigError};
use crate::types::{Quantization, ReduceOp};

pub use master::MasterArgs;
pub use train::TrainArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Parser)]
#[command(name = "churncomm", version, about = "Fault-tolerant collectives for churning peer groups")]
pub struct Cli {
    /// TOML or JSON config file.
    #[arg(long, global = true, env = "CHURNCOMM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Log filter for stderr, e.g. `info` or `churncomm=debug`.
    #[arg(long, global = true, env = "RUST_LOG", default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the master daemon until SIGINT or SIGTERM.
    Master(MasterArgs),
    /// Loopback all-reduce benchmark.
    Bench(BenchArgs),
    /// Spawn and kill trainers at random and check the shared state.
    Chaos(ChaosArgs),
    /// Run one training peer.
    Train(TrainArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    pub world: usize,
    /// Per-peer contribution, e.g. `64MiB`.
    #[arg(long, default_value = "64MiB", value_parser = bench::parse_size)]
    pub bytes: u64,
    /// Concurrent operations per round.
    #[arg(long, default_value_t = 1)]
    pub ops: usize,
    /// Connections per neighbour; defaults to the config.
    #[arg(long)]
    pub pool: Option<u32>,
    #[arg(long, default_value = "sum")]
    pub op: ReduceOp,
    #[arg(long, default_value = "none")]
    pub quant: Quantization,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Also write the measured cost matrix to this file.
    #[arg(long)]
    pub dump_matrix: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ChaosArgs {
    /// Run length in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub min_peers: usize,
    #[arg(long, default_value_t = 5)]
    pub max_peers: usize,
    #[arg(long, default_value_t = 500)]
    pub interval_min_ms: u64,
    #[arg(long, default_value_t = 1000)]
    pub interval_max_ms: u64,
    /// Stop trainers with SIGTERM (they leave with a goodbye) instead of SIGKILL.
    #[arg(long)]
    pub graceful: bool,
    #[arg(long, default_value_t = 30.0)]
    pub stall_timeout: f64,
    #[arg(long, default_value_t = 100)]
    pub iteration_ms: u64,
    #[arg(long, default_value = "diloco")]
    pub algo: String,
    #[arg(long, default_value_t = 1024)]
    pub dim: usize,
    /// Drive an external master instead of starting one.
    #[arg(long)]
    pub master: Option<String>,
}

/// Prints `value` as one JSON object on stdout with an `event` field.
pub fn emit(event: &str, value: &impl Serialize) {
    let mut v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
    let obj = match v.as_object_mut() {
        Some(o) => {
            o.insert("event".into(), event.into());
            v
        }
        None => serde_json::json!({ "event": event, "value": v }),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{obj}");
    let _ = out.flush();
}

/// JSON-lines logger on stderr.
pub fn init_logging(filter: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format(|buf, rec| {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap_or_default()
                .as_secs_f64();
            let line = serde_json::json!({
                "ts": ts,
                "level": rec.level().as_str(),
                "target": rec.target(),
                "pid": std::process::id(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// SIGINT and SIGTERM, blocked in every thread and consumed by `wait`.
pub struct TermSignals {
    set: libc::sigset_t,
}

impl TermSignals {
    /// Must run before any other thread is started so they all inherit
    /// the mask.
    pub fn block() -> Self {
        // SAFETY: the set is initialised by sigemptyset before use
        unsafe {
            let mut set: libc::sigset_t = std::mem::zeroed();
            libc::sigemptyset(&mut set);
            libc::sigaddset(&mut set, libc::SIGINT);
            libc::sigaddset(&mut set, libc::SIGTERM);
            libc::pthread_sigmask(libc::SIG_BLOCK, &set, std::ptr::null_mut());
            Self { set }
        }
    }

    pub fn wait(&self) -> i32 {
        let mut sig = 0;
        // SAFETY: valid set and out-pointer
        unsafe {
            libc::sigwait(&self.set, &mut sig);
        }
        sig
    }
}

// sigset_t is a plain bit set
unsafe impl Send for TermSignals {}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Master(a) => {
            master::run(&a, &cfg, TermSignals::block())?;
            Ok(true)
        }
        Command::Train(a) => {
            train::run(&a, &cfg, TermSignals::block())?;
            Ok(true)
        }
        Command::Bench(a) => {
            let params = bench::BenchParams {
                world: a.world,
                bytes: a.bytes,
                ops: a.ops,
                pool: a.pool.unwrap_or(cfg.collective.pool_size),
                op: a.op,
                quant: a.quant,
                repeats: a.repeats,
                net_chunk_bytes: cfg.collective.net_chunk_bytes,
                probe_bytes: cfg.topology.probe_bytes,
            };
            let report = bench::run(&params)?;
            if let Some(path) = &a.dump_matrix {
                let text = serde_json::to_string_pretty(&report.costs).expect("serializable");
                std::fs::write(path, text)?;
            }
            emit("bench", &report);
            Ok(true)
        }
        Command::Chaos(a) => {
            let params = chaos::ChaosParams {
                exe: std::env::current_exe()?,
                duration: Duration::from_secs_f64(a.duration),
                seed: a.seed,
                interval_ms: (a.interval_min_ms, a.interval_max_ms),
                min_peers: a.min_peers,
                max_peers: a.max_peers,
                graceful: a.graceful,
                stall_timeout: Duration::from_secs_f64(a.stall_timeout),
                iteration_ms: a.iteration_ms,
                algo: a.algo,
                dim: a.dim,
                master: a.master,
            };
            let report = chaos::run(&params)?;
            emit("chaos", &report);
            Ok(report.pass)
        }
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    init_logging(&cli.log);
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            error!("{e}");
            emit("error", &serde_json::json!({ "message": e.to_string() }));
            2
        }
    }
}
