//! Collective engine: transport, buffer pool, quantization and the
//! pipelined ring all-reduce.

pub mod p2p;
pub mod pool;
pub mod quant;
pub mod reduce;
pub mod ring;

use std::sync::atomic::{AtomicBool, Ordering};

pub use p2p::{ConnUsage, P2pConfig, P2pError, P2pNode, TrafficSnapshot, TrafficStats};
pub use quant::QuantError;
pub use reduce::{chunk_boundaries, chunk_range, Element};
pub use ring::{all_reduce_ring, OpContext, RingError, RingOp};

/// Polled by long-running operations to learn that they must stop.
pub trait AbortSource {
    fn is_aborted(&self) -> bool;
}

impl AbortSource for AtomicBool {
    fn is_aborted(&self) -> bool {
        self.load(Ordering::SeqCst)
    }
}

/// Never aborts. For running the engine without a master.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeverAbort;

impl AbortSource for NeverAbort {
    fn is_aborted(&self) -> bool {
        false
    }
}
