//! Content hashing and the shared-state data model.

pub mod hash;
mod state;

pub use hash::{simplehash, simplehash_reference, simplehash_with_workers};
pub use state::{DigestEntry, SharedState, SharedStateEntry, StateDigest};
