use std::thread;
use std::time::Instant;

use log::{debug, info, warn};

use super::{Algo, Observer, StepRecord, SyncRecord, ToyModel, TrainConfig, TrainReport};
use crate::client::{AsyncHandle, CommError, Communicator, TopologyChange};
use crate::sharedstate::{simplehash, SharedState};
use crate::types::{ReduceOp, SyncStrategy};

pub fn run(comm: &Communicator, cfg: &TrainConfig, obs: &dyn Observer) -> Result<TrainReport, CommError> {
    match cfg.algo {
        Algo::Ddp => run_ddp(comm, cfg, obs),
        Algo::Diloco => run_diloco(comm, cfg, obs),
        Algo::AsyncDiloco => run_async_diloco(comm, cfg, obs),
    }
}

/// Shared buffers of a loop: the parameters and, for DiLoCo, the outer
/// momentum. All entries always carry the same revision.
struct Shared {
    prefix: &'static str,
    theta: Vec<f32>,
    momentum: Option<Vec<f32>>,
    revision: u64,
}

impl Shared {
    fn with_state<R>(&mut self, f: impl FnOnce(&mut SharedState<'_>) -> R) -> R {
        let mut st = SharedState::new();
        let tk = format!("{}/theta", self.prefix);
        let mk = format!("{}/outer_m", self.prefix);
        st.push_f32(&tk, &mut self.theta, self.revision);
        if let Some(m) = self.momentum.as_mut() {
            st.push_f32(&mk, m, self.revision);
        }
        let r = f(&mut st);
        self.revision = st.max_revision();
        r
    }

    fn digest(&mut self) -> u64 {
        self.with_state(|s| s.digest().fingerprint())
    }
}

struct Ctx<'a> {
    comm: &'a Communicator,
    cfg: &'a TrainConfig,
    obs: &'a dyn Observer,
    report: TrainReport,
    iteration: u64,
}

impl Ctx<'_> {
    fn topology(&mut self) -> Result<TopologyChange, CommError> {
        loop {
            match self.comm.update_topology() {
                Err(CommError::NotAdmitted) => {
                    debug!("not admitted this round, asking again");
                    thread::sleep(std::time::Duration::from_millis(20));
                }
                other => return other,
            }
        }
    }

    fn sync(&mut self, sh: &mut Shared, strategy: SyncStrategy) -> Result<(), CommError> {
        let mut attempt = 0;
        loop {
            let res = sh.with_state(|st| self.comm.sync_shared_state(st, strategy));
            match res {
                Ok(outcome) => {
                    let rec = SyncRecord {
                        iteration: self.iteration,
                        revision: sh.revision,
                        strategy,
                        world: self.comm.world_size(),
                        digest: sh.digest(),
                        outcome,
                    };
                    self.obs.on_sync(&rec);
                    self.report.syncs.push(rec);
                    return Ok(());
                }
                Err(e @ CommError::SyncFailed(_)) if attempt < self.cfg.sync_retries => {
                    warn!("sync attempt {attempt} failed: {e}");
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Blocking all-reduce, retried on the survivors after every abort.
    fn reduce(&mut self, buf: &mut [f32]) -> Result<(), CommError> {
        loop {
            match self.comm.all_reduce(self.cfg.tag, buf, ReduceOp::Avg, self.cfg.quant) {
                Ok(_) => {
                    self.report.reduces += 1;
                    return Ok(());
                }
                Err(e @ CommError::Aborted { .. }) => {
                    self.report.aborts += 1;
                    debug!("{e}; retrying with world {}", self.comm.world_size());
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn step_done(&mut self, sh: &mut Shared, loss: f64, applied: bool) {
        let rec = StepRecord {
            iteration: self.iteration,
            revision: sh.revision,
            world: self.comm.world_size(),
            digest: sh.digest(),
            theta_hash: simplehash(bytemuck::cast_slice(&sh.theta)),
            loss,
            applied,
        };
        self.obs.on_step(&rec);
        self.report.steps.push(rec);
        self.iteration += 1;
    }

    fn compute_pause(&self) {
        if !self.cfg.compute_delay.is_zero() {
            thread::sleep(self.cfg.compute_delay);
        }
    }

    fn finish(mut self, sh: Shared, start: Instant) -> TrainReport {
        self.report.peer_id = self.comm.peer_id();
        self.report.final_revision = sh.revision;
        self.report.params = sh.theta;
        self.report.wall_s = start.elapsed().as_secs_f64();
        info!(
            "peer {} finished at revision {} after {} steps",
            self.report.peer_id,
            self.report.final_revision,
            self.report.steps.len()
        );
        self.report
    }
}

fn new_ctx<'a>(comm: &'a Communicator, cfg: &'a TrainConfig, obs: &'a dyn Observer) -> Ctx<'a> {
    Ctx {
        comm,
        cfg,
        obs,
        report: TrainReport::default(),
        iteration: 0,
    }
}

/// Per step: update topology, sync, local gradient, averaged gradient,
/// SGD step.
pub fn run_ddp(comm: &Communicator, cfg: &TrainConfig, obs: &dyn Observer) -> Result<TrainReport, CommError> {
    let start = Instant::now();
    let mut model = ToyModel::new(cfg.model);
    let mut sh = Shared {
        prefix: "ddp",
        theta: model.init_params(),
        momentum: None,
        revision: 0,
    };
    let mut ctx = new_ctx(comm, cfg, obs);
    let mut grad = vec![0.0f32; cfg.model.dim];
    let mut wide = vec![0.0f64; cfg.model.dim];
    while sh.revision < cfg.steps && !obs.should_stop() {
        obs.before_step(comm, sh.revision);
        ctx.topology()?;
        ctx.sync(&mut sh, SyncStrategy::EnforcePopular)?;
        if sh.revision >= cfg.steps {
            break;
        }
        for (w, t) in wide.iter_mut().zip(&sh.theta) {
            *w = *t as f64;
        }
        let loss = model.gradient(&wide, comm.peer_id(), sh.revision, &mut grad);
        ctx.compute_pause();
        ctx.reduce(&mut grad)?;
        let lr = cfg.inner_lr;
        for (t, g) in sh.theta.iter_mut().zip(&grad) {
            *t -= lr * g;
        }
        sh.revision += 1;
        ctx.step_done(&mut sh, loss, true);
    }
    Ok(ctx.finish(sh, start))
}

/// `inner_steps` local SGD steps from `theta_g`; writes the
/// pseudo-gradient `theta_g - theta_p` into `delta`.
fn inner_loop(
    model: &mut ToyModel,
    cfg: &TrainConfig,
    shard: u64,
    revision: u64,
    theta_p: &mut [f64],
    grad: &mut [f32],
) -> f64 {
    let mut loss = 0.0;
    let lr = cfg.inner_lr as f64;
    for h in 0..cfg.inner_steps as u64 {
        loss = model.gradient(theta_p, shard, revision * cfg.inner_steps as u64 + h, grad);
        for (p, g) in theta_p.iter_mut().zip(grad.iter()) {
            *p -= lr * *g as f64;
        }
    }
    loss
}

fn pseudo_gradient(theta_g: &[f32], theta_p: &[f64], delta: &mut [f32]) {
    for ((d, g), p) in delta.iter_mut().zip(theta_g).zip(theta_p) {
        *d = (*g as f64 - p) as f32;
    }
}

fn reset_inner(theta_g: &[f32], theta_p: &mut [f64]) {
    for (p, g) in theta_p.iter_mut().zip(theta_g) {
        *p = *g as f64;
    }
}

/// Per outer step: update topology, sync, H inner steps, averaged
/// pseudo-gradient, outer step.
pub fn run_diloco(comm: &Communicator, cfg: &TrainConfig, obs: &dyn Observer) -> Result<TrainReport, CommError> {
    let start = Instant::now();
    let mut model = ToyModel::new(cfg.model);
    let dim = cfg.model.dim;
    let mut sh = Shared {
        prefix: "diloco",
        theta: model.init_params(),
        momentum: Some(vec![0.0; dim]),
        revision: 0,
    };
    let mut ctx = new_ctx(comm, cfg, obs);
    let mut theta_p = vec![0.0f64; dim];
    let mut grad = vec![0.0f32; dim];
    let mut delta = vec![0.0f32; dim];
    while sh.revision < cfg.steps && !obs.should_stop() {
        obs.before_step(comm, sh.revision);
        ctx.topology()?;
        ctx.sync(&mut sh, SyncStrategy::EnforcePopular)?;
        if sh.revision >= cfg.steps {
            break;
        }
        reset_inner(&sh.theta, &mut theta_p);
        let loss = inner_loop(&mut model, cfg, comm.peer_id(), sh.revision, &mut theta_p, &mut grad);
        ctx.compute_pause();
        pseudo_gradient(&sh.theta, &theta_p, &mut delta);
        ctx.reduce(&mut delta)?;
        let m = sh.momentum.as_mut().unwrap();
        cfg.outer.step(&mut sh.theta, m, &delta);
        sh.revision += 1;
        ctx.step_done(&mut sh, loss, true);
    }
    Ok(ctx.finish(sh, start))
}

/// Awaits a background reduce. An aborted reduce is dropped: every
/// survivor sees the same abort, so all of them skip that update.
fn settle(ctx: &mut Ctx<'_>, h: AsyncHandle<f32>) -> Result<Option<Vec<f32>>, CommError> {
    let (buf, r) = h.wait();
    match r {
        Ok(_) => {
            ctx.report.reduces += 1;
            Ok(Some(buf))
        }
        Err(e @ CommError::Aborted { .. }) => {
            ctx.report.aborts += 1;
            debug!("background reduce dropped: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// One-step-delayed DiLoCo: the reduce of step t runs while step t+1
/// trains. Membership changes are only handled between reduces, and a
/// newcomer picks up the update it missed through a second sync.
pub fn run_async_diloco(comm: &Communicator, cfg: &TrainConfig, obs: &dyn Observer) -> Result<TrainReport, CommError> {
    let start = Instant::now();
    let mut model = ToyModel::new(cfg.model);
    let dim = cfg.model.dim;
    let mut sh = Shared {
        prefix: "async_diloco",
        theta: model.init_params(),
        momentum: Some(vec![0.0; dim]),
        revision: 0,
    };
    let mut ctx = new_ctx(comm, cfg, obs);
    let mut theta_p = vec![0.0f64; dim];
    let mut grad = vec![0.0f32; dim];
    let mut inflight: Option<AsyncHandle<f32>> = None;
    let mut spare: Option<Vec<f32>> = None;
    let mut first = true;
    reset_inner(&sh.theta, &mut theta_p);

    let result = (|| -> Result<(), CommError> {
        while sh.revision < cfg.steps && !obs.should_stop() {
            obs.before_step(comm, sh.revision);
            let mut prev: Option<Vec<f32>> = None;
            let mut self_new = false;
            let mut newcomer_joined = false;
            let membership = if first && !comm.is_accepted() {
                true
            } else {
                comm.are_peers_pending()?
            };
            first = false;
            if membership {
                if let Some(h) = inflight.take() {
                    prev = settle(&mut ctx, h)?;
                }
                let was_accepted = comm.is_accepted();
                let change = ctx.topology()?;
                // a group formed from scratch has nobody to catch up from
                self_new = !was_accepted && change.world > change.added.len() + 1;
                newcomer_joined = was_accepted && !change.added.is_empty();
                ctx.sync(&mut sh, SyncStrategy::EnforcePopular)?;
                reset_inner(&sh.theta, &mut theta_p);
            }

            let loss = inner_loop(&mut model, cfg, comm.peer_id(), sh.revision, &mut theta_p, &mut grad);
            ctx.compute_pause();
            if let Some(h) = inflight.take() {
                prev = settle(&mut ctx, h)?;
            }
            let mut delta = spare.take().unwrap_or_else(|| vec![0.0; dim]);
            pseudo_gradient(&sh.theta, &theta_p, &mut delta);

            let applied = prev.is_some();
            if let Some(d) = prev {
                let m = sh.momentum.as_mut().unwrap();
                cfg.outer.step(&mut sh.theta, m, &d);
                sh.revision += 1;
                spare = Some(d);
            }
            // the eavesdrop sync runs before the next reduce is launched,
            // so it never overlaps a collective
            if newcomer_joined {
                ctx.sync(&mut sh, SyncStrategy::SendOnly)?;
            } else if self_new {
                ctx.sync(&mut sh, SyncStrategy::ReceiveOnly)?;
            }
            reset_inner(&sh.theta, &mut theta_p);
            inflight = Some(comm.all_reduce_async(cfg.tag, delta, ReduceOp::Avg, cfg.quant)?);
            ctx.step_done(&mut sh, loss, applied);
        }
        Ok(())
    })();
    if let Some(h) = inflight.take() {
        // the last pseudo-gradient has no step left to be applied in
        let _ = h.wait();
    }
    result?;
    Ok(ctx.finish(sh, start))
}
