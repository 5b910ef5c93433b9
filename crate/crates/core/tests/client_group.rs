mod common;

use std::thread;

use churncomm::{Quantization, ReduceOp};
use common::{random_inputs, ring_oracle, spawn_group};

#[test]
fn group_forms_and_reduces() {
    let (master, comms) = spawn_group(3);
    for c in &comms {
        assert_eq!(c.world_size(), 3);
    }
    let ring = comms[0].ring();
    assert!(comms.iter().all(|c| c.ring() == ring));
    assert_eq!(master.ring(), ring);

    let inputs = random_inputs(7, 3, 1000);
    // inputs are indexed by ring position for the oracle
    let by_rank: Vec<Vec<f32>> = ring
        .iter()
        .map(|id| inputs[comms.iter().position(|c| c.peer_id() == *id).unwrap()].clone())
        .collect();
    let want = ring_oracle(&by_rank, ReduceOp::Sum);
    let outs: Vec<Vec<f32>> = thread::scope(|s| {
        let hs: Vec<_> = comms
            .iter()
            .zip(inputs.iter())
            .map(|(c, x)| {
                let mut b = x.clone();
                s.spawn(move || {
                    c.all_reduce(5, &mut b, ReduceOp::Sum, Quantization::None).unwrap();
                    b
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for o in &outs {
        assert_eq!(o, &want);
    }
    churncomm::master::audit::check(&master.audit().snapshot()).unwrap();
}
