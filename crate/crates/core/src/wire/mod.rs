//! Wire protocol shared by master and peer connections.

mod codec;
mod frame;
mod payload;

use std::io;

use thiserror::Error;

pub use codec::{PayloadReader, PayloadWriter};
pub use frame::{
    decode_frame, encode_frame, frame_header, parse_header, read_frame, read_frame_limited, read_header,
    write_frame, Frame, FrameDecoder, MessageType, FRAME_HEADER_LEN, MAX_PAYLOAD_LEN,
};
pub use payload::*;

/// Version carried in the first frame of every connection.
pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("payload of {len} bytes does not fit in a frame")]
    Oversize { len: usize },
    #[error("unknown message type code {0:#04x}")]
    UnknownMessageType(u8),
    #[error("incomplete frame, {needed} more bytes required")]
    Incomplete { needed: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl WireError {
    /// True for errors that mean the peer on the other side went away.
    pub fn is_disconnect(&self) -> bool {
        match self {
            WireError::Closed | WireError::Incomplete { .. } => true,
            WireError::Io(e) => matches!(
                e.kind(),
                io::ErrorKind::ConnectionReset
                    | io::ErrorKind::ConnectionAborted
                    | io::ErrorKind::BrokenPipe
                    | io::ErrorKind::UnexpectedEof
                    | io::ErrorKind::NotConnected
            ),
            _ => false,
        }
    }
}
