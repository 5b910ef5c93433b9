//! Peer-side communicator.

mod comm;
mod reduce;

use std::io;

use thiserror::Error;

use crate::collective::{P2pConfig, P2pError, RingError};
use crate::types::AbortReason;
use crate::wire::{ByeReason, WireError};

pub use comm::{Communicator, SyncOutcome, TopologyChange};
pub use reduce::{AsyncHandle, ReduceInfo};

#[derive(Debug, Error)]
pub enum CommError {
    #[error("cannot reach master at {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("master refused the connection ({reason:?}): {message}")]
    Refused { reason: ByeReason, message: String },
    #[error("connection to the master was lost")]
    MasterLost,
    #[error("master rejected the request: {0}")]
    Rejected(String),
    #[error("collective on tag {tag} aborted: {reason}")]
    Aborted { tag: u64, reason: AbortReason },
    #[error("not admitted to the group this round")]
    NotAdmitted,
    #[error("shared-state sync failed: {0}")]
    SyncFailed(String),
    #[error("invalid use: {0}")]
    Usage(String),
    #[error("unexpected message from master: {0}")]
    Protocol(String),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    P2p(#[from] P2pError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl CommError {
    /// Errors after which the same call can simply be made again.
    pub fn is_retryable(&self) -> bool {
        matches!(self, CommError::Aborted { .. } | CommError::NotAdmitted | CommError::SyncFailed(_))
    }
}

#[derive(Debug, Clone)]
pub struct CommConfig {
    pub master_addr: String,
    pub p2p: P2pConfig,
    /// Connections per neighbour; concurrent tags spread over them.
    pub pool_size: u32,
    /// `update_topology` keeps polling until the group has this many peers.
    pub min_peers: usize,
    /// Epoch of a group this peer belonged to before, 0 when fresh.
    pub known_epoch: u64,
}

impl CommConfig {
    pub fn new(master_addr: impl Into<String>) -> Self {
        Self {
            master_addr: master_addr.into(),
            p2p: P2pConfig::default(),
            pool_size: 4,
            min_peers: 1,
            known_epoch: 0,
        }
    }
}
