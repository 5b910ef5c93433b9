//! Whole scenarios shared by the dedicated tests and the acceptance run.
//! Each returns a one-line summary on success and the reason on failure.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use churncomm::algos::{self, Algo, ModelConfig, NoObserver, Observer, OuterOpt, ToyModel, TrainConfig, TrainReport};
use churncomm::client::{CommConfig, Communicator};
use churncomm::topology::{nearest_neighbor, solve_exact, solve_quick, CostMatrix};
use churncomm::{Quantization, ReduceOp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{on_all, oracle_for_ring, random_inputs, spawn_group};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// -- collectives -----------------------------------------------------------

/// Voted all-reduce through real communicators against the ring oracle.
pub fn oracle_equivalence() -> Outcome {
    let mut cases = 0;
    for w in 2..=5 {
        let (master, comms) = spawn_group(w);
        for (k, n) in [1usize, 7, 1024].into_iter().enumerate() {
            for (j, op) in [ReduceOp::Sum, ReduceOp::Avg, ReduceOp::Max].into_iter().enumerate() {
                let inputs: Vec<(u64, Vec<f32>)> = comms
                    .iter()
                    .map(|c| c.peer_id())
                    .zip(random_inputs((w * 100 + k * 10 + j) as u64, w, n))
                    .collect();
                let outs = on_all(&comms, |i, c| {
                    let mut b = inputs[i].1.clone();
                    let r = c.all_reduce(2, &mut b, op, Quantization::None).map(|info| info.ring);
                    (b, r)
                });
                for (b, ring) in outs {
                    let ring = ring.map_err(|e| format!("W={w} n={n} {op:?}: {e}"))?;
                    let want = oracle_for_ring(&inputs, &ring, op);
                    ensure!(bits(&b) == bits(&want), "W={w} n={n} {op:?}: result differs from the oracle");
                }
                cases += 1;
            }
        }
        churncomm::master::audit::check(&master.audit().snapshot())?;
        for c in comms {
            c.close();
        }
        master.shutdown();
    }
    Ok(format!("{cases} (W, N, op) cases bit-equal"))
}

/// Loopback bench traffic at world `w`. Returns the largest relative
/// deviation of any peer's payload TX or RX from 2(W-1)/W * bytes, and the
/// mean payload TX per peer.
pub fn traffic(w: usize, bytes: u64) -> Result<(f64, f64), String> {
    let params = churncomm::cli::bench::BenchParams {
        world: w,
        bytes,
        repeats: 1,
        ..Default::default()
    };
    let r = churncomm::cli::bench::run(&params).map_err(|e| e.to_string())?;
    let ideal = 2.0 * (w as f64 - 1.0) / w as f64 * bytes as f64;
    ensure!(r.peers.len() == w, "{} peer reports for W={w}", r.peers.len());
    let mut worst: f64 = 0.0;
    let mut sum_tx = 0.0;
    for p in &r.peers {
        for v in [p.payload_tx_bytes, p.payload_rx_bytes] {
            worst = worst.max((v - ideal).abs() / ideal);
        }
        sum_tx += p.payload_tx_bytes;
    }
    Ok((worst, sum_tx / w as f64))
}

// -- hashing ---------------------------------------------------------------

const FNV_BASIS: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn tree(v: &[u64]) -> u64 {
    if v.len() == 1 {
        return v[0];
    }
    let (l, r) = v.split_at(v.len() / 2);
    let (a, b) = (tree(l), tree(r));
    (a ^ b.rotate_left(27)).wrapping_mul(FNV_PRIME)
}

/// simplehash from its definition: 256 lanes of FNV-1a-64 over LE u32
/// words (word i on lane i mod 256, last word zero-padded), a depth-8
/// binary tree, then XOR with the byte length.
pub fn oracle_simplehash(buf: &[u8]) -> u64 {
    let mut lanes = vec![FNV_BASIS; 256];
    let mut padded = buf.to_vec();
    padded.resize(buf.len().div_ceil(4) * 4, 0);
    for (i, w) in padded.chunks_exact(4).enumerate() {
        let word = u32::from_le_bytes(w.try_into().unwrap()) as u64;
        lanes[i % 256] = (lanes[i % 256] ^ word).wrapping_mul(FNV_PRIME);
    }
    tree(&lanes) ^ buf.len() as u64
}

/// Every length 0..=4096 with every worker count, against both the test
/// oracle and the library's scalar reference.
pub fn hash_exhaustive() -> Outcome {
    use churncomm::sharedstate::{simplehash, simplehash_reference, simplehash_with_workers};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<u8> = (0..4096).map(|_| rng.gen()).collect();
    for len in 0..=4096 {
        let b = &data[..len];
        let want = oracle_simplehash(b);
        ensure!(simplehash_reference(b) == want, "reference differs from the definition at length {len}");
        ensure!(simplehash(b) == want, "simplehash differs at length {len}");
        for workers in [1, 2, 4, 8] {
            ensure!(
                simplehash_with_workers(b, workers) == want,
                "length {len}, {workers} workers"
            );
        }
    }
    Ok("4097 lengths x {1,2,4,8} workers".into())
}

/// Random buffers with log-uniform sizes up to `max_len`; parallel hash
/// against the scalar reference, and every 100th one against the test oracle.
pub fn hash_random(count: usize, max_len: usize, seed: u64) -> Outcome {
    use churncomm::sharedstate::{simplehash, simplehash_reference, simplehash_with_workers};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = vec![0u8; max_len];
    rng.fill(&mut pool[..]);
    let mut total = 0usize;
    for k in 0..count {
        let len = ((rng.gen::<f64>() * ((max_len + 1) as f64).ln()).exp() as usize - 1).min(max_len);
        let off = rng.gen_range(0..=max_len - len);
        // fresh bytes at the front so no two buffers share content
        let b = &mut pool[off..off + len];
        let head = len.min(64);
        rng.fill(&mut b[..head]);
        let b = &pool[off..off + len];
        let want = simplehash_reference(b);
        let workers = [1, 2, 4, 8][k % 4];
        ensure!(simplehash_with_workers(b, workers) == want, "buffer {k} ({len} bytes, {workers} workers)");
        ensure!(simplehash(b) == want, "buffer {k} ({len} bytes, default workers)");
        if k % 100 == 0 {
            ensure!(oracle_simplehash(b) == want, "buffer {k} ({len} bytes) against the definition");
        }
        total += len;
    }
    Ok(format!("{count} buffers, {:.1} MiB total", total as f64 / (1 << 20) as f64))
}

// -- topology --------------------------------------------------------------

fn oracle_cost(m: &[Vec<f64>], order: &[usize]) -> f64 {
    (0..order.len()).map(|k| m[order[k]][order[(k + 1) % order.len()]]).sum()
}

/// Cheapest cycle by enumerating every order with node 0 fixed first.
pub fn brute_force(m: &[Vec<f64>]) -> f64 {
    fn go(m: &[Vec<f64>], order: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        let n = m.len();
        if order.len() == n {
            *best = best.min(oracle_cost(m, order));
            return;
        }
        for j in 1..n {
            if !used[j] {
                used[j] = true;
                order.push(j);
                go(m, order, used, best);
                order.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; m.len()];
    used[0] = true;
    go(m, &mut vec![0], &mut used, &mut best);
    best
}

/// Best greedy nearest-neighbour cycle over all start nodes.
pub fn oracle_nearest_neighbor(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    (0..n)
        .map(|s| {
            let mut order = vec![s];
            while order.len() < n {
                let cur = *order.last().unwrap();
                let next = (0..n)
                    .filter(|j| !order.contains(j))
                    .min_by(|&a, &b| m[cur][a].partial_cmp(&m[cur][b]).unwrap().then(a.cmp(&b)))
                    .unwrap();
                order.push(next);
            }
            oracle_cost(m, &order)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn random_costs(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.gen_range(1.0..100.0) }).collect())
        .collect()
}

pub fn atsp(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut n8, mut n8_close) = (0, 0);
    for k in 0..instances {
        let n = 4 + k % 7;
        let rows = random_costs(n, &mut rng);
        let m = CostMatrix::from_rows(&rows);
        let opt = brute_force(&rows);
        let exact = solve_exact(&m).map_err(|e| e.to_string())?;
        let quick = solve_quick(&m, Duration::from_millis(250)).map_err(|e| e.to_string())?;
        let nn = oracle_nearest_neighbor(&rows);
        ensure!(
            (oracle_cost(&rows, &exact.order) - opt).abs() <= 1e-9 * opt,
            "instance {k} (n={n}): exact {} vs brute force {opt}",
            exact.cost
        );
        let q = oracle_cost(&rows, &quick.order);
        ensure!(q <= nn + 1e-9 * nn, "instance {k} (n={n}): quick {q} above nearest neighbour {nn}");
        // the library's own NN must agree with the oracle's
        let lib_nn = nearest_neighbor(&m).map_err(|e| e.to_string())?;
        ensure!((lib_nn.cost - nn).abs() <= 1e-9 * nn, "instance {k}: nearest neighbour {} vs {nn}", lib_nn.cost);
        if n == 8 {
            n8 += 1;
            if q <= opt * 1.15 {
                n8_close += 1;
            }
        }
    }
    let share = n8_close as f64 / n8 as f64;
    ensure!(share >= 0.9, "quick within 15% of optimum on {n8_close}/{n8} n=8 instances");
    Ok(format!(
        "{instances} instances; n=8 quick within 15% on {n8_close}/{n8} ({:.0}%)",
        share * 100.0
    ))
}

// -- training --------------------------------------------------------------

fn run_all(comms: &[Communicator], cfg: &TrainConfig) -> Result<Vec<TrainReport>, String> {
    thread::scope(|s| {
        let hs: Vec<_> = comms
            .iter()
            .map(|c| s.spawn(move || algos::run(c, cfg, &NoObserver)))
            .collect();
        hs.into_iter()
            .map(|h| h.join().unwrap().map_err(|e| e.to_string()))
            .collect()
    })
}

fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 1024,
        batch: 8,
        seed: 7,
    }
}

/// DDP and DiLoCo with one plain-SGD inner step and an SGD(1.0) outer step.
pub fn ddp_equals_diloco(steps: u64) -> Outcome {
    let (master, comms) = spawn_group(3);
    let base = TrainConfig {
        steps,
        inner_steps: 1,
        inner_lr: 1.0 / 32.0,
        outer: OuterOpt::Sgd { lr: 1.0 },
        model: small_model(),
        ..Default::default()
    };
    let ddp = run_all(
        &comms,
        &TrainConfig {
            algo: Algo::Ddp,
            ..base.clone()
        },
    )?;
    let dil = run_all(
        &comms,
        &TrainConfig {
            algo: Algo::Diloco,
            ..base
        },
    )?;
    for (a, b) in ddp.iter().zip(&dil) {
        ensure!(a.steps.len() as u64 == steps, "DDP ran {} steps", a.steps.len());
        ensure!(b.steps.len() as u64 == steps, "DiLoCo ran {} steps", b.steps.len());
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            ensure!(sa.revision == sb.revision, "revisions {} vs {}", sa.revision, sb.revision);
            ensure!(sa.theta_hash == sb.theta_hash, "diverged at step {}", sa.revision);
        }
        ensure!(bits(&a.params) == bits(&b.params), "final parameters differ");
    }
    ensure!(ddp.windows(2).all(|w| bits(&w[0].params) == bits(&w[1].params)), "peers disagree");
    let (first, last) = (ddp[0].steps[0].loss, ddp[0].steps[steps as usize - 1].loss);
    ensure!(last < first, "loss did not fall: {first} -> {last}");
    for c in comms {
        c.close();
    }
    master.shutdown();
    Ok(format!("{steps} steps at W=3 bit-equal, loss {first:.4} -> {last:.4}"))
}

struct JoinAt {
    at: u64,
    addr: String,
    cfg: TrainConfig,
    spawned: AtomicBool,
    newcomer: Mutex<Option<thread::JoinHandle<Result<TrainReport, String>>>>,
}

impl Observer for JoinAt {
    fn before_step(&self, comm: &Communicator, revision: u64) {
        if revision != self.at {
            return;
        }
        if !self.spawned.swap(true, Ordering::SeqCst) {
            let mut cc = CommConfig::new(self.addr.clone());
            cc.min_peers = 1;
            let cfg = self.cfg.clone();
            *self.newcomer.lock().unwrap() = Some(thread::spawn(move || {
                let c = Communicator::connect(cc).map_err(|e| e.to_string())?;
                let r = algos::run(&c, &cfg, &NoObserver).map_err(|e| e.to_string());
                c.close();
                r
            }));
        }
        // hold every veteran here until the master lists the newcomer, so
        // the whole group admits it in the same iteration
        let deadline = Instant::now() + Duration::from_secs(20);
        while !comm.are_peers_pending().unwrap_or(true) {
            if Instant::now() > deadline {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }
}

/// Async DiLoCo at W=2; a third peer joins when the group reaches
/// revision 5.
pub fn newcomer_joins() -> Outcome {
    let (master, comms) = spawn_group(2);
    let cfg = TrainConfig {
        algo: Algo::AsyncDiloco,
        steps: 12,
        inner_steps: 4,
        model: small_model(),
        compute_delay: Duration::from_millis(20),
        ..Default::default()
    };
    let obs = JoinAt {
        at: 5,
        addr: master.addr().to_string(),
        cfg: cfg.clone(),
        spawned: AtomicBool::new(false),
        newcomer: Mutex::new(None),
    };
    let vets: Vec<Result<TrainReport, String>> = thread::scope(|s| {
        let hs: Vec<_> = comms
            .iter()
            .map(|c| {
                let (obs, cfg) = (&obs, &cfg);
                s.spawn(move || algos::run(c, cfg, obs).map_err(|e| e.to_string()))
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let vets: Vec<TrainReport> = vets.into_iter().collect::<Result<_, _>>()?;
    let handle = obs.newcomer.lock().unwrap().take().ok_or("newcomer never started")?;
    let newcomer = handle.join().unwrap()?;

    ensure!(newcomer.syncs.len() == 2, "newcomer synced {} times", newcomer.syncs.len());
    ensure!(
        !newcomer.syncs[1].outcome.received.is_empty(),
        "second sync handed the newcomer nothing"
    );
    // one background reduce per outer step, nothing extra for catching up
    ensure!(
        newcomer.aborts == 0 && newcomer.reduces <= newcomer.steps.len() as u64,
        "newcomer ran {} reduces ({} aborted) over {} steps",
        newcomer.reduces,
        newcomer.aborts,
        newcomer.steps.len()
    );
    for v in &vets {
        ensure!(v.syncs.len() == 2, "veteran {} synced {} times", v.peer_id, v.syncs.len());
        ensure!(v.final_revision == 12, "veteran ended at revision {}", v.final_revision);
    }
    ensure!(newcomer.final_revision == 12, "newcomer ended at revision {}", newcomer.final_revision);
    let mut checked = 0;
    for rec in newcomer.steps.iter().filter(|r| r.revision >= 7) {
        for v in &vets {
            let peer = v
                .steps
                .iter()
                .find(|s| s.revision == rec.revision)
                .ok_or(format!("veteran has no step at revision {}", rec.revision))?;
            ensure!(peer.digest == rec.digest, "digest differs at revision {}", rec.revision);
            ensure!(peer.world == 3, "world {} at revision {}", peer.world, rec.revision);
        }
        checked += 1;
    }
    ensure!(checked >= 5, "only {checked} shared revisions from 7 on");
    ensure!(bits(&vets[0].params) == bits(&newcomer.params), "final parameters differ");
    for c in comms {
        c.close();
    }
    master.shutdown();
    Ok(format!(
        "newcomer synced {} times, digests equal on {checked} revisions from 7",
        newcomer.syncs.len()
    ))
}

/// Same loop body as async DiLoCo without any communication.
fn compute_only(cfg: &TrainConfig, iterations: u64) -> Duration {
    let mut model = ToyModel::new(cfg.model);
    let dim = cfg.model.dim;
    let mut p = vec![0.0f64; dim];
    let mut g = vec![0.0f32; dim];
    let start = Instant::now();
    for t in 0..iterations {
        for h in 0..cfg.inner_steps as u64 {
            model.gradient(&p, 1, t * cfg.inner_steps as u64 + h, &mut g);
            for (pi, gi) in p.iter_mut().zip(&g) {
                *pi -= cfg.inner_lr as f64 * *gi as f64;
            }
        }
        thread::sleep(cfg.compute_delay);
    }
    start.elapsed()
}

/// 50 async DiLoCo steps with 200 ms of compute each against the same
/// iterations without communication. Returns the worst wall-time ratio.
pub fn async_overlap() -> Result<(f64, String), String> {
    let (master, comms) = spawn_group(2);
    let cfg = TrainConfig {
        algo: Algo::AsyncDiloco,
        steps: 50,
        inner_steps: 1,
        model: ModelConfig {
            dim: 1 << 18,
            batch: 1,
            seed: 3,
        },
        compute_delay: Duration::from_millis(200),
        ..Default::default()
    };
    let reports = run_all(&comms, &cfg)?;
    for r in &reports {
        ensure!(r.final_revision == 50, "ended at revision {}", r.final_revision);
    }
    let iterations = reports[0].steps.len() as u64;
    let base = compute_only(&cfg, iterations).as_secs_f64();
    let worst = reports.iter().map(|r| r.wall_s).fold(0.0, f64::max);
    for c in comms {
        c.close();
    }
    master.shutdown();
    Ok((
        worst / base,
        format!("{iterations} iterations: training {worst:.2}s vs compute-only {base:.2}s"),
    ))
}
