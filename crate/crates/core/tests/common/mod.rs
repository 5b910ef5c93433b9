//! Test-side oracles and harnesses. Everything here is written from the
//! definitions, independently of the library code it checks.

#![allow(dead_code)]

pub mod scenarios;

use std::sync::Arc;
use std::thread;

use churncomm::collective::{all_reduce_ring, Element, NeverAbort, OpContext, P2pConfig, P2pNode, RingError, RingOp};
use churncomm::{Quantization, ReduceOp};

/// Rank-chunk ranges: sizes differ by at most one, larger ones first.
pub fn oracle_chunks(n: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for r in 0..w {
        let len = n / w + if r < n % w { 1 } else { 0 };
        out.push((start, start + len));
        start += len;
    }
    out
}

pub trait OracleNum: Copy + PartialOrd {
    fn add(a: Self, b: Self) -> Self;
    fn div(a: Self, w: usize) -> Self;
}

impl OracleNum for f32 {
    fn add(a: Self, b: Self) -> Self {
        a + b
    }
    fn div(a: Self, w: usize) -> Self {
        a / w as f32
    }
}

impl OracleNum for f64 {
    fn add(a: Self, b: Self) -> Self {
        a + b
    }
    fn div(a: Self, w: usize) -> Self {
        a / w as f64
    }
}

impl OracleNum for i32 {
    fn add(a: Self, b: Self) -> Self {
        a.wrapping_add(b)
    }
    fn div(a: Self, w: usize) -> Self {
        a / w as i32
    }
}

pub fn oracle_op<T: OracleNum>(op: ReduceOp, local: T, received: T) -> T {
    match op {
        ReduceOp::Sum | ReduceOp::Avg => T::add(local, received),
        ReduceOp::Max => {
            if received > local {
                received
            } else {
                local
            }
        }
        ReduceOp::Min => {
            if received < local {
                received
            } else {
                local
            }
        }
    }
}

/// Expected ring all-reduce result. Chunk `c` starts at rank `c` and is
/// folded into each following rank's own value in ring order.
pub fn ring_oracle<T: OracleNum>(inputs: &[Vec<T>], op: ReduceOp) -> Vec<T> {
    let w = inputs.len();
    let n = inputs[0].len();
    let mut out = inputs[0].clone();
    for (c, &(s, e)) in oracle_chunks(n, w).iter().enumerate() {
        for i in s..e {
            let mut acc = inputs[c][i];
            for j in 1..w {
                acc = oracle_op(op, inputs[(c + j) % w][i], acc);
            }
            out[i] = if op == ReduceOp::Avg { T::div(acc, w) } else { acc };
        }
    }
    out
}

/// Reference u8 min-max codec: returns (min, scale, bytes).
pub fn oracle_quantize(v: &[f32]) -> (f32, f32, Vec<u8>) {
    if v.is_empty() {
        return (0.0, 1.0, Vec::new());
    }
    let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi == lo { 1.0 } else { ((hi as f64 - lo as f64) / 255.0) as f32 };
    let q = v
        .iter()
        .map(|&x| {
            let t = ((x as f64 - lo as f64) / scale as f64).round();
            t.max(0.0).min(255.0) as u8
        })
        .collect();
    (lo, scale, q)
}

pub fn oracle_dequantize(min: f32, scale: f32, q: &[u8]) -> Vec<f32> {
    q.iter().map(|&b| (min as f64 + b as f64 * scale as f64) as f32).collect()
}

pub fn oracle_round_trip(v: &[f32]) -> Vec<f32> {
    let (m, s, q) = oracle_quantize(v);
    oracle_dequantize(m, s, &q)
}

/// Net-chunk slices of rank chunk (s, e) with `net` elements each.
fn net_pieces(s: usize, e: usize, net: usize) -> Vec<(usize, usize)> {
    if s == e {
        return vec![(s, s)];
    }
    (s..e).step_by(net).map(|p| (p, (p + net).min(e))).collect()
}

/// Expected quantized ring result with `net` elements per net chunk.
pub fn ring_oracle_quant(inputs: &[Vec<f32>], op: ReduceOp, net: usize) -> Vec<f32> {
    let w = inputs.len();
    let n = inputs[0].len();
    let chunks = oracle_chunks(n, w);
    let mut own: Vec<Vec<f32>> = inputs.to_vec();
    for x in own.iter_mut() {
        for &(s, e) in &chunks {
            for (ps, pe) in net_pieces(s, e, net) {
                let rt = oracle_round_trip(&x[ps..pe]);
                x[ps..pe].copy_from_slice(&rt);
            }
        }
    }
    let mut out = vec![0f32; n];
    for (c, &(s, e)) in chunks.iter().enumerate() {
        for (ps, pe) in net_pieces(s, e, net) {
            let mut acc: Vec<f32> = own[c][ps..pe].to_vec();
            for j in 1..w {
                let recv = oracle_round_trip(&acc);
                acc = own[(c + j) % w][ps..pe]
                    .iter()
                    .zip(&recv)
                    .map(|(&l, &r)| oracle_op(op, l, r))
                    .collect();
            }
            let fin = oracle_round_trip(&acc);
            for (i, v) in fin.into_iter().enumerate() {
                out[ps + i] = if op == ReduceOp::Avg { v / w as f32 } else { v };
            }
        }
    }
    out
}

/// `w` p2p nodes wired to each other without a master.
pub struct EngineGroup {
    pub nodes: Vec<Arc<P2pNode>>,
    pub ring: Vec<u64>,
}

impl EngineGroup {
    pub fn new(w: usize, net_chunk_bytes: usize) -> Self {
        let cfg = P2pConfig {
            net_chunk_bytes,
            ..P2pConfig::default()
        };
        let nodes: Vec<Arc<P2pNode>> = (0..w).map(|_| Arc::new(P2pNode::bind(cfg.clone()).unwrap())).collect();
        let ring: Vec<u64> = (1..=w as u64).collect();
        for (i, n) in nodes.iter().enumerate() {
            n.set_identity(ring[i], 1);
        }
        for n in &nodes {
            for (j, m) in nodes.iter().enumerate() {
                n.set_endpoint(ring[j], m.local_addr().to_string());
            }
        }
        Self { nodes, ring }
    }

    /// Runs one all-reduce on every node concurrently.
    pub fn all_reduce<T: Element>(
        &self,
        ctxs: &mut [OpContext],
        bufs: &mut [Vec<T>],
        tag: u64,
        seq: u64,
        op: ReduceOp,
        quant: Quantization,
    ) -> Vec<Result<(), RingError>> {
        thread::scope(|s| {
            let handles: Vec<_> = self
                .nodes
                .iter()
                .zip(ctxs.iter_mut())
                .zip(bufs.iter_mut())
                .map(|((node, ctx), buf)| {
                    let ring = &self.ring;
                    s.spawn(move || {
                        let rop = RingOp {
                            tag,
                            seq,
                            ring,
                            op,
                            quant,
                            slot: 0,
                        };
                        all_reduce_ring(node, ctx, buf, &rop, &NeverAbort)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }
}

/// Deterministic pseudo-random f32 inputs with mixed magnitudes.
pub fn random_inputs(seed: u64, w: usize, n: usize) -> Vec<Vec<f32>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..w)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * 10f32.powi(rng.gen_range(-3..4))).collect())
        .collect()
}

/// Master plus `w` communicators that have all joined one group.
pub fn spawn_group(w: usize) -> (churncomm::master::MasterHandle, Vec<churncomm::client::Communicator>) {
    spawn_group_with(w, churncomm::master::MasterConfig::default(), |_| {})
}

pub fn spawn_group_with(
    w: usize,
    mut mcfg: churncomm::master::MasterConfig,
    tweak: impl Fn(&mut churncomm::client::CommConfig),
) -> (churncomm::master::MasterHandle, Vec<churncomm::client::Communicator>) {
    use churncomm::client::{CommConfig, Communicator};
    mcfg.listen = "127.0.0.1:0".into();
    mcfg.probe_bytes = mcfg.probe_bytes.min(256 << 10);
    let master = churncomm::master::spawn_master(mcfg).unwrap();
    let addr = master.addr().to_string();
    let handles: Vec<_> = (0..w)
        .map(|_| {
            let mut cfg = CommConfig::new(addr.clone());
            cfg.min_peers = w;
            tweak(&mut cfg);
            thread::spawn(move || {
                let c = Communicator::connect(cfg).unwrap();
                c.update_topology().unwrap();
                c
            })
        })
        .collect();
    let mut comms: Vec<Communicator> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    comms.sort_by_key(|c| c.peer_id());
    (master, comms)
}

/// Expected reduction of per-peer inputs, given the ring the op ran over.
pub fn oracle_for_ring(inputs: &[(u64, Vec<f32>)], ring: &[u64], op: ReduceOp) -> Vec<f32> {
    let by_rank: Vec<Vec<f32>> = ring
        .iter()
        .map(|r| inputs.iter().find(|(id, _)| id == r).unwrap().1.clone())
        .collect();
    ring_oracle(&by_rank, op)
}

/// W=3 group with small net chunks; the peer at `victim` crashes after it
/// has sent `frames` data frames of a tag. Survivors must get exactly their
/// input back, then finish the same reduce over the W=2 ring.
pub fn abort_then_retry(n: usize, net_chunk_bytes: usize, frames: u64, victim: usize) -> Result<(), String> {
    use churncomm::client::CommError;
    let (master, comms) = spawn_group_with(3, churncomm::master::MasterConfig::default(), |c| {
        c.p2p.net_chunk_bytes = net_chunk_bytes;
        c.pool_size = 1;
    });
    let inputs: Vec<(u64, Vec<f32>)> = comms
        .iter()
        .zip(random_inputs(frames * 7 + victim as u64, 3, n))
        .map(|(c, x)| (c.peer_id(), x))
        .collect();
    comms[victim].node().set_crash_after_frames(Some(frames));
    let results: Vec<(Vec<f32>, Result<churncomm::client::ReduceInfo, CommError>)> = thread::scope(|s| {
        let hs: Vec<_> = comms
            .iter()
            .zip(&inputs)
            .map(|(c, (_, x))| {
                let mut b = x.clone();
                s.spawn(move || {
                    let r = c.all_reduce(3, &mut b, ReduceOp::Sum, Quantization::None);
                    (b, r)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut survivors = Vec::new();
    for (i, ((buf, r), c)) in results.iter().zip(&comms).enumerate() {
        if i == victim {
            continue;
        }
        match r {
            Err(CommError::Aborted { .. }) => {}
            other => return Err(format!("peer {} got {other:?} instead of an abort", c.peer_id())),
        }
        if buf != &inputs[i].1 {
            return Err(format!("peer {}: buffer differs from its input after the abort", c.peer_id()));
        }
        survivors.push(i);
    }

    let retried: Vec<Result<(Vec<f32>, Vec<u64>), String>> = thread::scope(|s| {
        let hs: Vec<_> = survivors
            .iter()
            .map(|&i| {
                let c = &comms[i];
                let mut b = inputs[i].1.clone();
                s.spawn(move || {
                    c.set_min_peers(2);
                    let ch = c.update_topology().map_err(|e| e.to_string())?;
                    if ch.world != 2 {
                        return Err(format!("world {} after the crash", ch.world));
                    }
                    let info = c
                        .all_reduce(3, &mut b, ReduceOp::Sum, Quantization::None)
                        .map_err(|e| e.to_string())?;
                    Ok((b, info.ring))
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in retried {
        let (buf, ring) = r?;
        let want = oracle_for_ring(&inputs, &ring, ReduceOp::Sum);
        if buf != want {
            return Err("retry result differs from the oracle".into());
        }
    }
    churncomm::master::audit::check(&master.audit().snapshot())?;
    for (i, c) in comms.into_iter().enumerate() {
        if i == victim {
            c.crash();
        } else {
            c.close();
        }
    }
    master.shutdown();
    Ok(())
}

/// Runs `f(rank, comm)` on every communicator at once and collects results.
pub fn on_all<R: Send>(
    comms: &[churncomm::client::Communicator],
    f: impl Fn(usize, &churncomm::client::Communicator) -> R + Sync,
) -> Vec<R> {
    thread::scope(|s| {
        let f = &f;
        let hs: Vec<_> = comms.iter().enumerate().map(|(i, c)| s.spawn(move || f(i, c))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Median API latencies in milliseconds on a loopback W=2 group.
#[derive(Debug, Clone, Copy)]
pub struct Latencies {
    pub update_topology_ms: f64,
    pub sync_ms: f64,
    pub enqueue_ms: f64,
    pub await_ms: f64,
}

pub fn measure_latencies(params: usize, reps: usize) -> Latencies {
    use churncomm::sharedstate::SharedState;
    use churncomm::SyncStrategy;
    use std::sync::Barrier;
    use std::time::Instant;

    let (master, comms) = spawn_group(2);
    let barrier = Barrier::new(2);
    let per_peer = on_all(&comms, |_, c| {
        let mut theta = vec![0.25f32; params];
        let mut lat = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..reps {
            barrier.wait();
            let t = Instant::now();
            let ch = c.update_topology().unwrap();
            lat.0.push(t.elapsed().as_secs_f64() * 1e3);
            assert!(ch.is_unchanged());

            barrier.wait();
            let t = Instant::now();
            let mut st = SharedState::new();
            st.push_f32("theta", &mut theta, 1);
            let out = c.sync_shared_state(&mut st, SyncStrategy::EnforcePopular).unwrap();
            lat.1.push(t.elapsed().as_secs_f64() * 1e3);
            assert!(out.in_sync);

            barrier.wait();
            let buf = vec![1.0f32; params];
            let t = Instant::now();
            let h = c.all_reduce_async(1, buf, ReduceOp::Sum, Quantization::None).unwrap();
            lat.2.push(t.elapsed().as_secs_f64() * 1e3);
            let t = Instant::now();
            let (buf, r) = h.wait();
            lat.3.push(t.elapsed().as_secs_f64() * 1e3);
            r.unwrap();
            assert_eq!(buf[0], 2.0);
        }
        lat
    });
    for c in comms {
        c.close();
    }
    master.shutdown();
    // the slower peer bounds what a caller observes
    let pick = |f: fn(&(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        per_peer.iter().map(|l| median(f(l).clone())).fold(0.0, f64::max)
    };
    Latencies {
        update_topology_ms: pick(|l| &l.0),
        sync_ms: pick(|l| &l.1),
        enqueue_ms: pick(|l| &l.2),
        await_ms: pick(|l| &l.3),
    }
}

/// Runs `ops` concurrent all-reduces of `bytes` each on a W=`w` group with
/// `pool` connections per neighbour. Returns the number of distinct
/// connections to its ring successor that carried payload, per peer, and
/// whether every result matched the oracle.
pub fn concurrent_ops(w: usize, ops: usize, pool: u32, bytes: usize) -> (Vec<usize>, bool) {
    let n = bytes / 4;
    let (master, comms) = spawn_group_with(w, churncomm::master::MasterConfig::default(), |c| c.pool_size = pool);
    let ring = comms[0].ring();
    let inputs: Vec<Vec<Vec<f32>>> = (0..ops).map(|k| random_inputs(k as u64, w, n)).collect();
    let before: Vec<Vec<churncomm::collective::ConnUsage>> =
        comms.iter().map(|c| c.node().connection_usage()).collect();
    let outs = on_all(&comms, |i, c| {
        let hs: Vec<_> = (0..ops)
            .map(|k| {
                c.all_reduce_async(k as u64, inputs[k][i].clone(), ReduceOp::Sum, Quantization::None)
                    .unwrap()
            })
            .collect();
        hs.into_iter()
            .map(|h| {
                let (b, r) = h.wait();
                (b, r.unwrap().ring)
            })
            .collect::<Vec<_>>()
    });
    let mut ok = true;
    for k in 0..ops {
        let tagged: Vec<(u64, Vec<f32>)> = comms.iter().map(|c| c.peer_id()).zip(inputs[k].clone()).collect();
        for per_peer in &outs {
            let (buf, r) = &per_peer[k];
            ok &= *buf == oracle_for_ring(&tagged, r, ReduceOp::Sum);
        }
    }
    let used = comms
        .iter()
        .zip(&before)
        .map(|(c, b)| {
            let pos = ring.iter().position(|&p| p == c.peer_id()).unwrap();
            let next = ring[(pos + 1) % w];
            c.node()
                .connection_usage()
                .iter()
                .filter(|u| u.peer == next)
                .filter(|u| {
                    let old = b.iter().find(|o| o.peer == u.peer && o.slot == u.slot).map_or(0, |o| o.payload_tx);
                    u.payload_tx > old
                })
                .count()
        })
        .collect();
    for c in comms {
        c.close();
    }
    master.shutdown();
    (used, ok)
}
