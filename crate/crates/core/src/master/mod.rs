//! The master: membership, voting and topology for one group.

pub mod audit;
pub mod plan;
mod service;
pub mod state;
pub mod tally;

use std::time::Duration;

pub use audit::{AuditEvent, AuditLog, AuditRecord, MajorOp};
pub use service::{spawn_master, MasterHandle, MasterStatus, MatrixDump};
pub use state::{Action, ConnState, Input, MasterState};

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub listen: String,
    /// How long a vote may wait for stragglers before they are kicked.
    pub vote_timeout: Duration,
    /// Payload size of one bandwidth probe.
    pub probe_bytes: u32,
    pub quick_time_limit: Duration,
    /// Run the exact solver in the background after each membership change.
    pub moonshot: bool,
    /// Fixed group epoch; random when unset.
    pub epoch: Option<u64>,
}

impl Default for MasterConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:48148".into(),
            vote_timeout: Duration::from_secs(30),
            probe_bytes: 4 << 20,
            quick_time_limit: Duration::from_millis(250),
            moonshot: true,
            epoch: None,
        }
    }
}
