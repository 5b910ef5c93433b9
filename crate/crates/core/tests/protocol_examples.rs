//! The byte examples in docs/protocol.md, checked against the encoder.

use churncomm::wire::{Bye, ByeReason, JoinRequest, JoinRole, VoteCast, WireMessage, PROTOCOL_VERSION};

fn hex(s: &str) -> Vec<u8> {
    s.split_whitespace().map(|b| u8::from_str_radix(b, 16).unwrap()).collect()
}

#[test]
fn vote_cast() {
    let m = VoteCast { tid: 5, yes: true };
    assert_eq!(m.to_frame_bytes(), hex("00 00 00 0a 04 00 00 00 00 00 00 00 05 01"));
}

#[test]
fn bye() {
    let m = Bye {
        reason: ByeReason::Leaving,
        message: String::new(),
    };
    assert_eq!(m.to_frame_bytes(), hex("00 00 00 04 14 04 00 00"));
}

#[test]
fn client_join() {
    let m = JoinRequest {
        version: PROTOCOL_VERSION,
        role: JoinRole::Client {
            p2p_port: 4000,
            known_epoch: 0,
        },
    };
    assert_eq!(
        m.to_frame_bytes(),
        hex("00 00 00 0e 01 00 01 00 0f a0 00 00 00 00 00 00 00 00")
    );
}
