//! Voted all-reduce on top of the ring engine.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use log::debug;
use serde::Serialize;

use super::comm::{Communicator, Inner};
use super::CommError;
use crate::collective::{all_reduce_ring, Element, RingOp};
use crate::types::{Quantization, ReduceOp};
use crate::wire::{CollectiveCompleteVote, CollectiveInitVote, CommitBody, Message, TransitionCommit};

/// Per-operation mailbox for one tag.
pub(super) struct TagSlot {
    pub(super) abort: AtomicBool,
    pub(super) tx: Sender<Message>,
    rx: Receiver<Message>,
}

impl TagSlot {
    fn new() -> Arc<Self> {
        let (tx, rx) = unbounded();
        Arc::new(Self {
            abort: AtomicBool::new(false),
            tx,
            rx,
        })
    }
}

type Job = Box<dyn FnOnce() + Send>;

/// Runs the jobs queued on one pool slot, in order.
pub(super) struct SlotWorker {
    jobs: Option<Sender<Job>>,
    thread: Option<JoinHandle<()>>,
}

impl SlotWorker {
    pub(super) fn spawn(peer: u64, slot: usize) -> std::io::Result<Self> {
        let (tx, rx) = unbounded::<Job>();
        let thread = thread::Builder::new()
            .name(format!("reduce-{peer}-{slot}"))
            .spawn(move || {
                for job in rx {
                    job();
                }
            })?;
        Ok(Self {
            jobs: Some(tx),
            thread: Some(thread),
        })
    }

    pub(super) fn join(mut self) {
        self.jobs.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReduceInfo {
    pub tag: u64,
    pub seq: u64,
    /// Ring the operation ran over.
    pub ring: Vec<u64>,
}

impl ReduceInfo {
    pub fn world(&self) -> usize {
        self.ring.len()
    }
}

/// An enqueued all-reduce. Waiting hands the buffer back, reduced on
/// success and restored to its input on any failure.
#[must_use = "the buffer only comes back through wait()"]
pub struct AsyncHandle<T> {
    tag: u64,
    done: Receiver<(Vec<T>, Result<ReduceInfo, CommError>)>,
}

impl<T> std::fmt::Debug for AsyncHandle<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AsyncHandle").field("tag", &self.tag).finish()
    }
}

impl<T> AsyncHandle<T> {
    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn is_finished(&self) -> bool {
        !self.done.is_empty()
    }

    pub fn wait(self) -> (Vec<T>, Result<ReduceInfo, CommError>) {
        self.done.recv().expect("reduce worker exited without answering")
    }
}

struct TagGuard<'a> {
    inner: &'a Inner,
    tag: u64,
}

impl Drop for TagGuard<'_> {
    fn drop(&mut self) {
        self.inner.node.route(self.tag).deactivate();
        self.inner.tags.lock().unwrap().remove(&self.tag);
    }
}

fn reserve(inner: &Inner, tag: u64) -> Result<Arc<TagSlot>, CommError> {
    if inner.master_lost() {
        return Err(CommError::MasterLost);
    }
    if !inner.is_accepted() {
        return Err(CommError::Usage("all-reduce before joining the group".into()));
    }
    let mut tags = inner.tags.lock().unwrap();
    if tags.contains_key(&tag) {
        return Err(CommError::Usage(format!("tag {tag} already has an operation in flight")));
    }
    let slot = TagSlot::new();
    tags.insert(tag, Arc::clone(&slot));
    Ok(slot)
}

fn run<T: Element>(
    inner: &Inner,
    pool_slot: usize,
    tag: u64,
    ts: &TagSlot,
    buf: &mut [T],
    op: ReduceOp,
    quant: Quantization,
) -> Result<ReduceInfo, CommError> {
    let _guard = TagGuard { inner, tag };
    // frames may arrive as soon as the others see the init commit
    inner.node.route(tag).activate();
    inner.send(CollectiveInitVote {
        tag,
        byte_len: std::mem::size_of_val(buf) as u64,
        dtype: T::DTYPE,
        op,
        quant,
    })?;
    let (seq, ring) = match inner.recv(&ts.rx)? {
        Message::TransitionCommit(TransitionCommit {
            body: CommitBody::CollectiveInit { seq, ring, .. },
            ..
        }) => (seq, ring),
        Message::AbortNotify(a) => return Err(CommError::Aborted { tag, reason: a.reason }),
        other => return Err(CommError::Protocol(format!("{:?} while waiting for init", other.msg_type()))),
    };
    inner.set_ring(&ring);

    let mut ctx = inner.slots[pool_slot].lock().unwrap();
    let rop = RingOp {
        tag,
        seq,
        ring: &ring,
        op,
        quant,
        slot: pool_slot as u32,
    };
    let res = all_reduce_ring(&inner.node, &mut ctx, buf, &rop, &ts.abort);
    if let Err(e) = &res {
        debug!("tag {tag} seq {seq}: {e}");
    }
    let verdict = inner
        .send(CollectiveCompleteVote {
            tag,
            seq,
            ok: res.is_ok(),
        })
        .and_then(|()| loop {
            match inner.recv(&ts.rx)? {
                Message::TransitionCommit(TransitionCommit {
                    body: CommitBody::CollectiveComplete { seq: s, .. },
                    ..
                }) if s == seq => break Ok(()),
                Message::AbortNotify(a) if a.seq == seq || a.seq == 0 => {
                    break Err(CommError::Aborted { tag, reason: a.reason })
                }
                other => debug!("tag {tag}: ignoring stale {:?}", other.msg_type()),
            }
        });
    match verdict {
        Ok(()) => {
            res?;
            Ok(ReduceInfo { tag, seq, ring })
        }
        Err(e) => {
            if res.is_ok() {
                ctx.restore_into(buf);
            }
            Err(e)
        }
    }
}

impl Communicator {
    /// Blocking all-reduce of `buf` in place. On error `buf` holds its
    /// input again.
    pub fn all_reduce<T: Element>(
        &self,
        tag: u64,
        buf: &mut [T],
        op: ReduceOp,
        quant: Quantization,
    ) -> Result<ReduceInfo, CommError> {
        if self.pending_handles() > 0 {
            return Err(CommError::Usage(
                "blocking all-reduce while async handles are pending; await them first".into(),
            ));
        }
        let ts = reserve(&self.inner, tag)?;
        let slot = (tag % self.inner.slots.len() as u64) as usize;
        run(&self.inner, slot, tag, &ts, buf, op, quant)
    }

    /// Enqueues an all-reduce on the pool slot `tag % pool_size`. Ops on
    /// the same slot run in enqueue order.
    pub fn all_reduce_async<T: Element>(
        &self,
        tag: u64,
        buf: Vec<T>,
        op: ReduceOp,
        quant: Quantization,
    ) -> Result<AsyncHandle<T>, CommError> {
        let ts = reserve(&self.inner, tag)?;
        let slot = (tag % self.inner.slots.len() as u64) as usize;
        let (done_tx, done_rx) = bounded(1);
        let inner = Arc::clone(&self.inner);
        inner.in_flight.fetch_add(1, Ordering::SeqCst);
        let job: Job = Box::new(move || {
            let mut buf = buf;
            let r = run(&inner, slot, tag, &ts, &mut buf, op, quant);
            inner.in_flight.fetch_sub(1, Ordering::SeqCst);
            let _ = done_tx.send((buf, r));
        });
        let jobs = self.workers[slot].jobs.as_ref().expect("worker running");
        if let Err(e) = jobs.send(job) {
            // the worker is gone; run the job here so the handle still resolves
            (e.0)();
        }
        Ok(AsyncHandle { tag, done: done_rx })
    }
}
