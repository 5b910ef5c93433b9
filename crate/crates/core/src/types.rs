//! Small enums shared by the wire protocol, the master and the peers.

use serde::{Deserialize, Serialize};

macro_rules! wire_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident = $code:expr),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[repr(u8)]
        pub enum $name {
            $($variant = $code),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

wire_enum! {
    /// Element type of a buffer.
    Dtype { F32 = 0, F64 = 1, U8 = 2, I32 = 3, I64 = 4 }
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

wire_enum! {
    ReduceOp { Sum = 0, Avg = 1, Max = 2, Min = 3 }
}

wire_enum! {
    /// Transport quantization applied to an all-reduce.
    Quantization { None = 0, MinMaxU8 = 1 }
}

wire_enum! {
    /// Role a peer plays in a shared-state sync.
    SyncStrategy { EnforcePopular = 0, SendOnly = 1, ReceiveOnly = 2 }
}

wire_enum! {
    AbortReason { PeerLost = 1, Mismatch = 2, LocalFailure = 3, MasterLost = 4, Timeout = 5, Rejected = 6 }
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AbortReason::PeerLost => "peer lost",
            AbortReason::Mismatch => "buffer mismatch across peers",
            AbortReason::LocalFailure => "peer reported a local failure",
            AbortReason::MasterLost => "master connection lost",
            AbortReason::Timeout => "vote timed out",
            AbortReason::Rejected => "request is illegal in the current group state",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SyncStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "enforcePopular" | "enforce-popular" => Ok(SyncStrategy::EnforcePopular),
            "sendOnly" | "send-only" => Ok(SyncStrategy::SendOnly),
            "receiveOnly" | "receive-only" => Ok(SyncStrategy::ReceiveOnly),
            other => Err(format!("unknown sync strategy {other:?}")),
        }
    }
}

impl std::str::FromStr for ReduceOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(ReduceOp::Sum),
            "avg" => Ok(ReduceOp::Avg),
            "max" => Ok(ReduceOp::Max),
            "min" => Ok(ReduceOp::Min),
            other => Err(format!("unknown reduce op {other:?}")),
        }
    }
}

impl std::str::FromStr for Quantization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Quantization::None),
            "u8" | "minmax-u8" | "minmaxu8" => Ok(Quantization::MinMaxU8),
            other => Err(format!("unknown quantization {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for d in Dtype::ALL {
            assert_eq!(Dtype::from_code(d.code()), Some(*d));
        }
        for s in SyncStrategy::ALL {
            assert_eq!(SyncStrategy::from_code(s.code()), Some(*s));
        }
        assert_eq!(ReduceOp::from_code(9), None);
    }

    #[test]
    fn parse_strategy_names() {
        assert_eq!("sendOnly".parse::<SyncStrategy>().unwrap(), SyncStrategy::SendOnly);
        assert!("bogus".parse::<SyncStrategy>().is_err());
    }
}
