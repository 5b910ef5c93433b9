//! Churn harness: trainer subprocesses are spawned and killed on a random
//! schedule while their step and sync records are cross-checked.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::CliError;
use crate::master::{audit, spawn_master, MasterConfig, MasterHandle};

#[derive(Debug, Clone)]
pub struct ChaosParams {
    /// The `churncomm` executable used for the trainers.
    pub exe: PathBuf,
    pub duration: Duration,
    pub seed: u64,
    /// Range of the pause between two schedule actions.
    pub interval_ms: (u64, u64),
    pub min_peers: usize,
    pub max_peers: usize,
    /// Send SIGTERM and let trainers say goodbye instead of SIGKILL.
    pub graceful: bool,
    pub stall_timeout: Duration,
    /// Simulated compute per trainer iteration.
    pub iteration_ms: u64,
    pub algo: String,
    pub dim: usize,
    /// Use an external master instead of an in-process one.
    pub master: Option<String>,
}

impl Default for ChaosParams {
    fn default() -> Self {
        Self {
            exe: PathBuf::from("churncomm"),
            duration: Duration::from_secs(60),
            seed: 1,
            interval_ms: (500, 1000),
            min_peers: 2,
            max_peers: 5,
            graceful: false,
            stall_timeout: Duration::from_secs(30),
            iteration_ms: 100,
            algo: "diloco".into(),
            dim: 1024,
            master: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ChaosReport {
    pub pass: bool,
    pub duration_s: f64,
    pub spawns: u64,
    pub kills: u64,
    pub peak_live: usize,
    pub final_revision: u64,
    pub revisions_checked: usize,
    pub steps_checked: u64,
    pub syncs_checked: u64,
    /// Longest time without the group revision advancing.
    pub max_stall_s: f64,
    pub unexpected_exits: u64,
    pub failures: Vec<String>,
}

#[derive(Debug)]
enum Event {
    Line { child: u64, value: serde_json::Value },
    Closed { child: u64 },
}

struct Trainer {
    id: u64,
    proc: Child,
    last_revision: Option<u64>,
    last_step: Option<u64>,
    /// Set once the harness decided to stop it.
    doomed: bool,
}

fn spawn_trainer(p: &ChaosParams, addr: &str, id: u64, tx: Sender<Event>) -> Result<Trainer, CliError> {
    let mut proc = Command::new(&p.exe)
        .args(["train", "--master", addr, "--algo", &p.algo])
        .args(["--steps", &u64::MAX.to_string()])
        .args(["--compute-ms", &p.iteration_ms.to_string()])
        .args(["--dim", &p.dim.to_string(), "--batch", "8"])
        .args(["--min-peers", "1", "--pool-size", "1"])
        .env("RUST_LOG", std::env::var("CHAOS_CHILD_LOG").unwrap_or_else(|_| "warn".into()))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let out = proc.stdout.take().expect("piped");
    thread::Builder::new().name(format!("chaos-rd-{id}")).spawn(move || {
        for line in BufReader::new(out).lines() {
            let Ok(line) = line else { break };
            match serde_json::from_str(&line) {
                Ok(value) => {
                    let _ = tx.send(Event::Line { child: id, value });
                }
                Err(_) => warn!("trainer {id}: unparsable line {line:?}"),
            }
        }
        let _ = tx.send(Event::Closed { child: id });
    })?;
    Ok(Trainer {
        id,
        proc,
        last_revision: None,
        last_step: None,
        doomed: false,
    })
}

fn stop_trainer(t: &mut Trainer, graceful: bool) {
    t.doomed = true;
    if graceful {
        // SAFETY: plain kill(2) on a child we own
        unsafe {
            libc::kill(t.proc.id() as libc::pid_t, libc::SIGTERM);
        }
    } else {
        let _ = t.proc.kill();
    }
}

struct Checker {
    digests: HashMap<u64, u64>,
    report: ChaosReport,
    max_revision: u64,
    last_advance: Instant,
}

impl Checker {
    fn fail(&mut self, msg: String) {
        warn!("chaos: {msg}");
        if self.report.failures.len() < 50 {
            self.report.failures.push(msg);
        }
    }

    fn record(&mut self, child: u64, kind: &str, revision: u64, digest: u64) {
        match self.digests.get(&revision) {
            Some(&d) if d != digest => {
                self.fail(format!(
                    "trainer {child} {kind} at revision {revision}: digest {digest:016x}, group has {d:016x}"
                ));
            }
            Some(_) => {}
            None => {
                self.digests.insert(revision, digest);
            }
        }
        if revision > self.max_revision {
            self.max_revision = revision;
            let now = Instant::now();
            self.report.max_stall_s = self.report.max_stall_s.max((now - self.last_advance).as_secs_f64());
            self.last_advance = now;
        }
    }

    fn line(&mut self, t: &mut Trainer, v: &serde_json::Value) {
        let kind = v["event"].as_str().unwrap_or("");
        let rev = v["revision"].as_u64();
        let digest = v["digest"].as_u64();
        match (kind, rev, digest) {
            ("step", Some(r), Some(d)) => {
                self.report.steps_checked += 1;
                // async DiLoCo has steps that apply nothing (first step,
                // dropped reduce); those may not move the revision
                let applied = v["applied"].as_bool().unwrap_or(true);
                if let Some(last) = t.last_step {
                    if r < last || (applied && r == last) {
                        self.fail(format!("trainer {} stepped from revision {last} to {r}", t.id));
                    }
                }
                if t.last_revision.is_some_and(|last| r < last) {
                    self.fail(format!("trainer {} fell behind its last sync at step {r}", t.id));
                }
                t.last_step = Some(r);
                t.last_revision = Some(r);
                self.record(t.id, "step", r, d);
            }
            ("sync", Some(r), Some(d)) => {
                self.report.syncs_checked += 1;
                if let Some(last) = t.last_revision {
                    if r < last {
                        self.fail(format!("trainer {} synced back from revision {last} to {r}", t.id));
                    }
                }
                t.last_revision = Some(r);
                self.record(t.id, "sync", r, d);
            }
            ("error", ..) => {
                if !t.doomed {
                    self.fail(format!("trainer {} failed: {}", t.id, v["message"]));
                }
            }
            _ => {}
        }
    }
}

fn own_master() -> Result<MasterHandle, CliError> {
    Ok(spawn_master(MasterConfig {
        listen: "127.0.0.1:0".into(),
        probe_bytes: 256 << 10,
        ..Default::default()
    })?)
}

pub fn run(p: &ChaosParams) -> Result<ChaosReport, CliError> {
    if p.min_peers > p.max_peers || p.max_peers == 0 || p.interval_ms.0 > p.interval_ms.1 {
        return Err(CliError::Usage("need min_peers <= max_peers, max_peers >= 1, lo <= hi".into()));
    }
    let master = match &p.master {
        Some(_) => None,
        None => Some(own_master()?),
    };
    let addr = match (&p.master, &master) {
        (Some(a), _) => a.clone(),
        (None, Some(m)) => m.addr().to_string(),
        _ => unreachable!(),
    };
    info!("chaos against master {addr} for {:?}", p.duration);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (tx, rx): (Sender<Event>, Receiver<Event>) = unbounded();
    let mut live: Vec<Trainer> = Vec::new();
    let mut dying: Vec<Trainer> = Vec::new();
    let mut next_id = 0u64;
    let start = Instant::now();
    let mut chk = Checker {
        digests: HashMap::new(),
        report: ChaosReport::default(),
        max_revision: 0,
        last_advance: start,
    };

    let mut spawn = |live: &mut Vec<Trainer>, chk: &mut Checker| -> Result<(), CliError> {
        let t = spawn_trainer(p, &addr, next_id, tx.clone())?;
        next_id += 1;
        chk.report.spawns += 1;
        live.push(t);
        chk.report.peak_live = chk.report.peak_live.max(live.len());
        Ok(())
    };
    for _ in 0..p.min_peers.max(1) {
        spawn(&mut live, &mut chk)?;
    }
    let mut next_action = start + Duration::from_millis(rng.gen_range(p.interval_ms.0..=p.interval_ms.1));

    while start.elapsed() < p.duration {
        let timeout = next_action
            .saturating_duration_since(Instant::now())
            .min(Duration::from_millis(100));
        match rx.recv_timeout(timeout) {
            Ok(Event::Line { child, value }) => {
                if let Some(t) = live.iter_mut().chain(dying.iter_mut()).find(|t| t.id == child) {
                    chk.line(t, &value);
                }
            }
            Ok(Event::Closed { child }) => {
                if let Some(i) = live.iter().position(|t| t.id == child) {
                    let mut t = live.swap_remove(i);
                    let status = t.proc.wait().ok();
                    chk.report.unexpected_exits += 1;
                    chk.fail(format!("trainer {child} exited on its own ({status:?})"));
                } else if let Some(i) = dying.iter().position(|t| t.id == child) {
                    let mut t = dying.swap_remove(i);
                    let _ = t.proc.wait();
                }
            }
            Err(_) => {}
        }
        if Instant::now() >= next_action {
            let n = live.len();
            let grow = n < p.min_peers || (n < p.max_peers && (n <= p.min_peers || rng.gen_bool(0.5)));
            if grow || n == 0 {
                spawn(&mut live, &mut chk)?;
            } else if n > p.min_peers.max(1) || p.min_peers == 0 {
                let i = rng.gen_range(0..n);
                let mut t = live.swap_remove(i);
                info!("chaos: stopping trainer {}", t.id);
                stop_trainer(&mut t, p.graceful);
                chk.report.kills += 1;
                dying.push(t);
            }
            next_action = Instant::now() + Duration::from_millis(rng.gen_range(p.interval_ms.0..=p.interval_ms.1));
        }
        if chk.last_advance.elapsed() > p.stall_timeout {
            let msg = format!(
                "no revision advance for {:?} (stuck at {})",
                p.stall_timeout, chk.max_revision
            );
            chk.fail(msg);
            break;
        }
    }

    let gap = chk.last_advance.elapsed().as_secs_f64();
    chk.report.max_stall_s = chk.report.max_stall_s.max(gap);
    for t in live.iter_mut().chain(dying.iter_mut()) {
        let _ = t.proc.kill();
        let _ = t.proc.wait();
    }
    if let Some(m) = &master {
        if let Err(e) = audit::check(&m.audit().snapshot()) {
            chk.fail(format!("master audit: {e}"));
        }
    }
    let mut report = chk.report;
    report.duration_s = start.elapsed().as_secs_f64();
    report.final_revision = chk.max_revision;
    report.revisions_checked = chk.digests.len();
    if report.final_revision == 0 {
        report.failures.push("the shared state never advanced".into());
    }
    report.pass = report.failures.is_empty();
    if let Some(m) = master {
        m.shutdown();
    }
    Ok(report)
}
