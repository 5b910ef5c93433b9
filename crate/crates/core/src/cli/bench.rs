//! Loopback all-reduce benchmark. The master and all peers run in this
//! process; every peer has its own sockets and threads.

use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use log::info;
use serde::Serialize;

use super::CliError;
use crate::client::{CommConfig, Communicator};
use crate::collective::ConnUsage;
use crate::master::{spawn_master, MasterConfig, MatrixDump};
use crate::types::{Quantization, ReduceOp};

#[derive(Debug, Clone)]
pub struct BenchParams {
    pub world: usize,
    /// Contribution of one peer to one operation.
    pub bytes: u64,
    /// Concurrent operations per round, each on its own tag.
    pub ops: usize,
    pub pool: u32,
    pub op: ReduceOp,
    pub quant: Quantization,
    pub repeats: usize,
    pub net_chunk_bytes: usize,
    pub probe_bytes: u32,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            world: 2,
            bytes: 64 << 20,
            ops: 1,
            pool: 4,
            op: ReduceOp::Sum,
            quant: Quantization::None,
            repeats: 3,
            net_chunk_bytes: 256 << 10,
            probe_bytes: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PeerTraffic {
    pub peer: u64,
    /// Wire bytes per round, framing included.
    pub tx_bytes: f64,
    pub rx_bytes: f64,
    pub payload_tx_bytes: f64,
    pub payload_rx_bytes: f64,
    /// Outbound connections that carried payload during the timed rounds.
    pub connections: Vec<ConnUsage>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub world: usize,
    pub bytes: u64,
    pub ops: usize,
    pub pool: u32,
    pub op: ReduceOp,
    pub quant: Quantization,
    pub repeats: usize,
    pub ring: Vec<u64>,
    pub time_s_mean: f64,
    pub time_s_std: f64,
    /// Contributed bytes of all ops in a round over the round's wall time.
    pub effective_throughput_bytes_per_s: f64,
    pub effective_throughput_gbit_s: f64,
    /// `2 (W-1) / W * bytes * ops`, the ideal ring traffic per peer.
    pub expected_bytes_per_peer: f64,
    pub peers: Vec<PeerTraffic>,
    /// Largest relative deviation of any peer's TX or RX from the ideal.
    pub traffic_rel_error: f64,
    pub costs: MatrixDump,
}

/// Ideal ring all-reduce traffic in each direction for one peer.
pub fn ring_bytes_per_peer(world: usize, bytes: f64) -> f64 {
    if world < 2 {
        return 0.0;
    }
    2.0 * (world as f64 - 1.0) / world as f64 * bytes
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn run(p: &BenchParams) -> Result<BenchReport, CliError> {
    if p.world == 0 || p.ops == 0 || p.repeats == 0 || p.bytes % 4 != 0 {
        return Err(CliError::Usage(
            "world, ops and repeats must be positive and bytes a multiple of 4".into(),
        ));
    }
    let master = spawn_master(MasterConfig {
        listen: "127.0.0.1:0".into(),
        probe_bytes: p.probe_bytes,
        vote_timeout: Duration::from_secs(60),
        ..Default::default()
    })?;
    let addr = master.addr().to_string();
    let joins: Vec<_> = (0..p.world)
        .map(|_| {
            let mut cfg = CommConfig::new(addr.clone());
            cfg.min_peers = p.world;
            cfg.pool_size = p.pool;
            cfg.p2p.net_chunk_bytes = p.net_chunk_bytes;
            thread::spawn(move || -> Result<Communicator, CliError> {
                let c = Communicator::connect(cfg)?;
                c.update_topology()?;
                Ok(c)
            })
        })
        .collect();
    let mut comms = Vec::with_capacity(p.world);
    for j in joins {
        comms.push(j.join().map_err(|_| CliError::Failed("peer thread panicked".into()))??);
    }
    comms.sort_by_key(|c| c.peer_id());
    info!("bench group formed: ring {:?}", master.ring());

    let n = (p.bytes / 4) as usize;
    let comms: Vec<Arc<Communicator>> = comms.into_iter().map(Arc::new).collect();
    let start_gate = Arc::new(Barrier::new(p.world + 1));
    let end_gate = Arc::new(Barrier::new(p.world + 1));
    // one warm-up round opens the pool connections and fills the buffer pools
    let rounds = p.repeats + 1;
    let workers: Vec<_> = comms
        .iter()
        .enumerate()
        .map(|(rank, c)| {
            let c = Arc::clone(c);
            let (sg, eg) = (Arc::clone(&start_gate), Arc::clone(&end_gate));
            let p = p.clone();
            thread::spawn(move || -> Result<(), CliError> {
                let mut bufs: Vec<Vec<f32>> = (0..p.ops)
                    .map(|k| (0..n).map(|i| ((rank + k + i) % 251) as f32 * 0.25).collect())
                    .collect();
                let mut failure = None;
                for _ in 0..rounds {
                    sg.wait();
                    let mut handles = Vec::with_capacity(p.ops);
                    for (k, b) in bufs.drain(..).enumerate() {
                        match c.all_reduce_async(k as u64, b, p.op, p.quant) {
                            Ok(h) => handles.push(h),
                            Err(e) => {
                                failure.get_or_insert(e);
                            }
                        }
                    }
                    for h in handles {
                        let (b, r) = h.wait();
                        if let Err(e) = r {
                            failure.get_or_insert(e);
                        }
                        bufs.push(b);
                    }
                    // keep the round structure intact so the barriers line up
                    bufs.resize_with(p.ops, || vec![0.0; n]);
                    eg.wait();
                }
                match failure {
                    Some(e) => Err(e.into()),
                    None => Ok(()),
                }
            })
        })
        .collect();

    let mut times = Vec::with_capacity(p.repeats);
    let mut before = Vec::new();
    let mut conn_before = Vec::new();
    for round in 0..rounds {
        if round == 1 {
            before = comms.iter().map(|c| c.traffic()).collect();
            conn_before = comms.iter().map(|c| c.node().connection_usage()).collect();
        }
        start_gate.wait();
        let t0 = Instant::now();
        end_gate.wait();
        if round > 0 {
            times.push(t0.elapsed().as_secs_f64());
        }
    }
    for w in workers {
        w.join().map_err(|_| CliError::Failed("bench worker panicked".into()))??;
    }

    let reps = p.repeats as f64;
    let expected = ring_bytes_per_peer(p.world, p.bytes as f64 * p.ops as f64);
    let mut worst: f64 = 0.0;
    let peers: Vec<PeerTraffic> = comms
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = c.traffic().since(&before[i]);
            let connections = c
                .node()
                .connection_usage()
                .into_iter()
                .filter_map(|mut u| {
                    let prior = conn_before[i]
                        .iter()
                        .find(|b| (b.peer, b.slot) == (u.peer, u.slot))
                        .map_or(0, |b| b.payload_tx);
                    u.payload_tx = u.payload_tx.saturating_sub(prior);
                    (u.payload_tx > 0).then_some(u)
                })
                .collect();
            let t = PeerTraffic {
                peer: c.peer_id(),
                tx_bytes: d.wire_tx as f64 / reps,
                rx_bytes: d.wire_rx as f64 / reps,
                payload_tx_bytes: d.payload_tx as f64 / reps,
                payload_rx_bytes: d.payload_rx as f64 / reps,
                connections,
            };
            if expected > 0.0 {
                worst = worst
                    .max((t.tx_bytes - expected).abs() / expected)
                    .max((t.rx_bytes - expected).abs() / expected);
            }
            t
        })
        .collect();

    let (mean, std) = mean_std(&times);
    let contributed = p.bytes as f64 * p.ops as f64;
    let report = BenchReport {
        world: p.world,
        bytes: p.bytes,
        ops: p.ops,
        pool: p.pool,
        op: p.op,
        quant: p.quant,
        repeats: p.repeats,
        ring: master.ring(),
        time_s_mean: mean,
        time_s_std: std,
        effective_throughput_bytes_per_s: contributed / mean,
        effective_throughput_gbit_s: contributed * 8.0 / mean / 1e9,
        expected_bytes_per_peer: expected,
        peers,
        traffic_rel_error: worst,
        costs: master.status().costs,
    };
    drop(comms);
    master.shutdown();
    Ok(report)
}

/// Parses sizes such as `4096`, `64MiB`, `1.5GB` or `256k`.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let v: f64 = num.trim().parse().map_err(|_| format!("bad size {s:?}"))?;
    let mult: f64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "k" | "kb" => 1e3,
        "m" | "mb" => 1e6,
        "g" | "gb" => 1e9,
        "ki" | "kib" => 1024.0,
        "mi" | "mib" => 1024.0 * 1024.0,
        "gi" | "gib" => 1024.0 * 1024.0 * 1024.0,
        other => return Err(format!("unknown unit {other:?} in {s:?}")),
    };
    let bytes = v * mult;
    if !(0.0..=u64::MAX as f64).contains(&bytes) {
        return Err(format!("size out of range: {s:?}"));
    }
    Ok(bytes.round() as u64)
}
