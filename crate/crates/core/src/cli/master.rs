use clap::Args;
use log::info;

use super::{emit, CliError, TermSignals};
use crate::config::Config;
use crate::master::spawn_master;

#[derive(Debug, Clone, Args)]
pub struct MasterArgs {
    /// host:port to listen on; port 0 picks a free one.
    #[arg(long, env = "CHURNCOMM_MASTER_ADDR")]
    pub listen: Option<String>,
    /// Fixed group epoch instead of a random one.
    #[arg(long)]
    pub epoch: Option<u64>,
    /// Skip the background exact topology solve.
    #[arg(long)]
    pub no_moonshot: bool,
}

pub fn run(args: &MasterArgs, cfg: &Config, signals: TermSignals) -> Result<(), CliError> {
    let mut mcfg = cfg.master_config();
    if let Some(l) = &args.listen {
        mcfg.listen = l.clone();
    }
    mcfg.epoch = args.epoch;
    if args.no_moonshot {
        mcfg.moonshot = false;
    }
    let handle = spawn_master(mcfg)?;
    emit(
        "listening",
        &serde_json::json!({ "addr": handle.addr().to_string(), "epoch": handle.epoch() }),
    );
    let sig = signals.wait();
    info!("signal {sig}: shutting down");
    let status = handle.status();
    handle.shutdown();
    emit(
        "stopped",
        &serde_json::json!({ "ring": status.ring, "registered": status.registered }),
    );
    Ok(())
}
