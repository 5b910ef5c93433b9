//! Fault-tolerant collective communications over unreliable networks.
//!
//! A central master tracks membership and commits every group transition by
//! unanimous vote; peers run pipelined ring all-reduces directly between each
//! other and keep a set of shared buffers bit-identical.

#[cfg(not(target_endian = "little"))]
compile_error!("tensor payloads are sent as native little-endian bytes");

pub mod algos;
pub mod cli;
pub mod client;
pub mod collective;
pub mod config;
pub mod master;
pub mod sharedstate;
pub mod topology;
pub mod types;
pub mod wire;

pub use types::{AbortReason, Dtype, Quantization, ReduceOp, SyncStrategy};
