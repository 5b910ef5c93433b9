//! Pipelined ring all-reduce (reduce-scatter followed by all-gather).
//!
//! Rank chunk `c` covers [`chunk_range`]`(n, w, c)`. In reduce step `s` rank
//! `r` sends chunk `r - s` and folds the incoming chunk `r - s - 1` into its
//! buffer, so after `w - 1` steps rank `r` holds the fully reduced chunk
//! `r + 1`. The gather phase circulates the reduced chunks the same way.
//! Each rank chunk travels as one or more net chunks so that sending and
//! receiving overlap.

use std::mem::size_of;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TryRecvError};
use thiserror::Error;

use super::p2p::{OutConn, P2pError, P2pNode, Piece, Route, RxItem, SendResult};
use super::pool::PooledBuf;
use super::quant::{self, QuantError, QuantParams};
use super::reduce::{accumulate_bytes, chunk_range, finalize, Element};
use super::AbortSource;
use crate::types::{Dtype, Quantization, ReduceOp};
use crate::wire::{ChunkHeader, QuantMetaMsg};

const POLL: Duration = Duration::from_millis(5);
const CANCEL_GRACE: Duration = Duration::from_secs(1);

pub const MAX_WORLD: usize = 1 << 11;
pub const MAX_NET_CHUNKS: usize = 1 << 20;

/// `chunk_index` on the wire: bit 31 stage, bits 20..31 step, bits 0..20 net chunk.
#[inline]
pub fn chunk_index(stage: u32, step: usize, k: usize) -> u32 {
    debug_assert!(stage <= 1 && step < MAX_WORLD && k < MAX_NET_CHUNKS);
    (stage << 31) | ((step as u32) << 20) | k as u32
}

#[derive(Debug, Error)]
pub enum RingError {
    #[error("operation aborted")]
    Aborted,
    #[error("local peer {0} is not a ring member")]
    NotInRing(u64),
    #[error("world size {0} exceeds the supported maximum")]
    WorldTooLarge(usize),
    #[error("{0} net chunks per rank chunk exceeds the supported maximum")]
    TooManyChunks(usize),
    #[error("connecting to peer {peer}: {source}")]
    Connect {
        peer: u64,
        #[source]
        source: P2pError,
    },
    #[error("sending to peer {peer}: {reason}")]
    Send { peer: u64, reason: String },
    #[error("connection from peer {0} was lost")]
    PeerLost(u64),
    #[error("protocol violation by peer {peer}: {detail}")]
    Protocol { peer: u64, detail: String },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("quantized reduction needs f32 data, got {0:?}")]
    QuantDtype(Dtype),
    #[error("local p2p node is down")]
    Down,
}

/// Parameters of one all-reduce attempt.
#[derive(Debug, Clone, Copy)]
pub struct RingOp<'a> {
    pub tag: u64,
    pub seq: u64,
    /// Peer ids in ring order.
    pub ring: &'a [u64],
    pub op: ReduceOp,
    pub quant: Quantization,
    /// Connection pool slot to send on.
    pub slot: u32,
}

/// Reusable per-operation scratch: once warmed up, repeated operations of
/// the same size allocate nothing.
pub struct OpContext {
    pieces: Vec<Piece>,
    staging: Vec<u8>,
    held: [Vec<(QuantMetaMsg, PooledBuf)>; 2],
    backup: Vec<u8>,
    cancel: Arc<AtomicBool>,
    done_tx: Sender<SendResult>,
    done_rx: Receiver<SendResult>,
    in_flight: bool,
}

// SAFETY: `pieces` only holds pointers while an operation is running on the
// owning thread; between operations they are never dereferenced.
unsafe impl Send for OpContext {}

impl std::fmt::Debug for OpContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpContext").field("backup_len", &self.backup.len()).finish()
    }
}

impl Default for OpContext {
    fn default() -> Self {
        Self::new()
    }
}

impl OpContext {
    pub fn new() -> Self {
        let (done_tx, done_rx) = bounded(4);
        Self {
            pieces: Vec::new(),
            staging: Vec::new(),
            held: [Vec::new(), Vec::new()],
            backup: Vec::new(),
            cancel: Arc::new(AtomicBool::new(false)),
            done_tx,
            done_rx,
            in_flight: false,
        }
    }

    fn begin(&mut self, bytes: &[u8]) {
        self.backup.clear();
        self.backup.extend_from_slice(bytes);
        self.cancel.store(false, Ordering::SeqCst);
        while self.done_rx.try_recv().is_ok() {}
        self.in_flight = false;
        self.pieces.clear();
        self.held[0].clear();
        self.held[1].clear();
    }

    /// Copies the input of the last operation back into `buf`. Returns false
    /// when the sizes disagree (nothing is written then).
    pub fn restore_into<T: bytemuck::Pod>(&self, buf: &mut [T]) -> bool {
        let bytes: &mut [u8] = bytemuck::cast_slice_mut(buf);
        if bytes.len() != self.backup.len() {
            return false;
        }
        bytes.copy_from_slice(&self.backup);
        true
    }

    /// Ensures the sender thread no longer reads caller memory.
    fn quiesce(&mut self, conn: Option<&OutConn>) {
        if !self.in_flight {
            return;
        }
        self.cancel.store(true, Ordering::SeqCst);
        if self.done_rx.recv_timeout(CANCEL_GRACE).is_err() {
            // a write is stuck; breaking the socket makes it return
            if let Some(c) = conn {
                c.shutdown();
            }
            let _ = self.done_rx.recv();
        }
        self.in_flight = false;
    }

    fn release(&mut self) {
        self.pieces.clear();
        self.held[0].clear();
        self.held[1].clear();
    }
}

/// Runs one all-reduce over `buf` in place. On error `buf` holds its input
/// again.
pub fn all_reduce_ring<T: Element>(
    node: &P2pNode,
    ctx: &mut OpContext,
    buf: &mut [T],
    op: &RingOp<'_>,
    abort: &dyn AbortSource,
) -> Result<(), RingError> {
    let w = op.ring.len();
    let me = node.peer_id();
    let rank = op.ring.iter().position(|&p| p == me).ok_or(RingError::NotInRing(me))?;
    if w > MAX_WORLD {
        return Err(RingError::WorldTooLarge(w));
    }
    if op.quant == Quantization::MinMaxU8 && T::DTYPE != Dtype::F32 {
        return Err(RingError::QuantDtype(T::DTYPE));
    }
    ctx.begin(bytemuck::cast_slice(buf));
    if w == 1 {
        finalize(buf, op.op, 1);
        return Ok(());
    }
    if abort.is_aborted() {
        return Err(RingError::Aborted);
    }

    let succ = op.ring[(rank + 1) % w];
    let pred = op.ring[(rank + w - 1) % w];
    let conn = node
        .connection(succ, op.slot)
        .map_err(|source| RingError::Connect { peer: succ, source })?;
    let route = node.route(op.tag);
    let n = buf.len();
    let net = match op.quant {
        Quantization::None => (node.net_chunk_bytes() / size_of::<T>()).max(1),
        Quantization::MinMaxU8 => node.net_chunk_bytes().max(1),
    };
    let max_chunk = chunk_range(n, w, 0).1;
    if piece_count(0, max_chunk, net) > MAX_NET_CHUNKS {
        return Err(RingError::TooManyChunks(piece_count(0, max_chunk, net)));
    }

    // every inbound frame of this operation could be buffered at once
    let _reserved = node.pool().reserve(2 * (w - 1) * piece_count(0, max_chunk, net));
    let base = buf.as_mut_ptr();
    let runner = Runner {
        node,
        route: &route,
        conn: &conn,
        abort,
        op,
        w,
        rank,
        pred,
        succ,
        n,
        net,
    };
    let result = match op.quant {
        Quantization::None => runner.run_raw(ctx, base),
        Quantization::MinMaxU8 => runner.run_quant(ctx, base as *mut f32),
    };
    ctx.quiesce(Some(&conn));
    ctx.release();
    match result {
        Ok(()) => {
            finalize(buf, op.op, w as u32);
            Ok(())
        }
        Err(e) => {
            ctx.restore_into(buf);
            Err(e)
        }
    }
}

#[inline]
fn piece_count(s: usize, e: usize, net: usize) -> usize {
    (e - s).div_ceil(net).max(1)
}

#[inline]
fn piece(s: usize, e: usize, net: usize, k: usize) -> (usize, usize) {
    let ps = s + k * net;
    (ps, (ps + net).min(e))
}

struct Runner<'a> {
    node: &'a P2pNode,
    route: &'a Route,
    conn: &'a OutConn,
    abort: &'a dyn AbortSource,
    op: &'a RingOp<'a>,
    w: usize,
    rank: usize,
    pred: u64,
    succ: u64,
    n: usize,
    net: usize,
}

impl Runner<'_> {
    fn range(&self, c: usize) -> (usize, usize) {
        chunk_range(self.n, self.w, c)
    }

    fn tx_chunk(&self, step: usize) -> usize {
        (self.rank + self.w - step) % self.w
    }

    fn rx_chunk(&self, step: usize) -> usize {
        (self.rank + 2 * self.w - step - 1) % self.w
    }

    fn gather_chunk(&self, step: usize) -> usize {
        (self.rank + 1 + self.w - step) % self.w
    }

    fn header(&self, stage: u32, step: usize, k: usize, byte_offset: usize, byte_len: usize) -> ChunkHeader {
        ChunkHeader {
            tag: self.op.tag,
            seq: self.op.seq,
            chunk_index: chunk_index(stage, step, k),
            byte_offset: byte_offset as u64,
            byte_len: byte_len as u32,
        }
    }

    fn meta(&self, chunk_index: u32, p: QuantParams) -> QuantMetaMsg {
        QuantMetaMsg {
            tag: self.op.tag,
            seq: self.op.seq,
            chunk_index,
            min: p.min,
            scale: p.scale,
        }
    }

    fn check_alive(&self) -> Result<(), RingError> {
        if self.node.is_down() {
            return Err(RingError::Down);
        }
        if self.abort.is_aborted() {
            return Err(RingError::Aborted);
        }
        Ok(())
    }

    fn submit(&self, ctx: &mut OpContext) -> Result<(), RingError> {
        // SAFETY: pieces point into the caller's buffer, `ctx.staging` or
        // `ctx.held`, none of which is touched before `wait_send` or
        // `quiesce` observes completion.
        let sent = unsafe { self.conn.submit_pieces(&ctx.pieces, &ctx.cancel, &ctx.done_tx) };
        sent.map_err(|e| RingError::Send {
            peer: self.succ,
            reason: e.err().unwrap_or_default(),
        })?;
        ctx.in_flight = true;
        Ok(())
    }

    fn poll_send(&self, ctx: &mut OpContext) -> Result<(), RingError> {
        if ctx.in_flight {
            match ctx.done_rx.try_recv() {
                Ok(Ok(())) => ctx.in_flight = false,
                Ok(Err(reason)) => {
                    ctx.in_flight = false;
                    return Err(RingError::Send { peer: self.succ, reason });
                }
                Err(TryRecvError::Empty) => {}
                Err(TryRecvError::Disconnected) => unreachable!("context owns a sender"),
            }
        }
        Ok(())
    }

    fn wait_send(&self, ctx: &mut OpContext) -> Result<(), RingError> {
        while ctx.in_flight {
            match ctx.done_rx.recv_timeout(POLL) {
                Ok(Ok(())) => ctx.in_flight = false,
                Ok(Err(reason)) => {
                    ctx.in_flight = false;
                    return Err(RingError::Send { peer: self.succ, reason });
                }
                Err(RecvTimeoutError::Timeout) => self.check_alive()?,
                Err(RecvTimeoutError::Disconnected) => unreachable!("context owns a sender"),
            }
        }
        Ok(())
    }

    fn protocol(&self, detail: String) -> RingError {
        RingError::Protocol { peer: self.pred, detail }
    }

    /// Next relevant item from the predecessor; stale traffic is skipped.
    fn next_item(&self, ctx: &mut OpContext) -> Result<RxItem, RingError> {
        loop {
            self.check_alive()?;
            self.poll_send(ctx)?;
            let item = match self.route.receiver().recv_timeout(POLL) {
                Ok(item) => item,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => unreachable!("route owns a sender"),
            };
            let (from, seq) = match &item {
                RxItem::Lost { from } if *from == self.pred => return Err(RingError::PeerLost(self.pred)),
                RxItem::Lost { .. } => continue,
                RxItem::Data { from, header, .. } => (*from, header.seq),
                RxItem::Meta { from, meta } => (*from, meta.seq),
            };
            if from != self.pred || seq < self.op.seq {
                continue;
            }
            if seq > self.op.seq {
                return Err(self.protocol(format!("frame for seq {seq} during seq {}", self.op.seq)));
            }
            return Ok(item);
        }
    }

    fn recv_piece(
        &self,
        ctx: &mut OpContext,
        expect: ChunkHeader,
        with_meta: bool,
    ) -> Result<(Option<QuantParams>, QuantMetaMsg, PooledBuf), RingError> {
        let mut meta = None;
        if with_meta {
            match self.next_item(ctx)? {
                RxItem::Meta { meta: m, .. } => {
                    if m.chunk_index != expect.chunk_index {
                        return Err(self.protocol(format!(
                            "quant meta for chunk {:#x}, expected {:#x}",
                            m.chunk_index, expect.chunk_index
                        )));
                    }
                    if !(m.min.is_finite() && m.scale.is_finite() && m.scale > 0.0) {
                        return Err(self.protocol(format!("bad quant meta min={} scale={}", m.min, m.scale)));
                    }
                    meta = Some(m);
                }
                RxItem::Data { header, .. } => {
                    return Err(self.protocol(format!("data {:#x} without quant meta", header.chunk_index)));
                }
                RxItem::Lost { .. } => unreachable!("filtered by next_item"),
            }
        }
        match self.next_item(ctx)? {
            RxItem::Data { header, buf, .. } => {
                if header != expect {
                    return Err(self.protocol(format!("got chunk {header:?}, expected {expect:?}")));
                }
                let params = meta.map(|m| QuantParams {
                    min: m.min,
                    scale: m.scale,
                });
                Ok((params, meta.unwrap_or(self.meta(0, QuantParams { min: 0.0, scale: 1.0 })), buf))
            }
            RxItem::Meta { meta: m, .. } => Err(self.protocol(format!("unexpected quant meta {:#x}", m.chunk_index))),
            RxItem::Lost { .. } => unreachable!("filtered by next_item"),
        }
    }

    fn push_raw_pieces<T>(&self, ctx: &mut OpContext, base: *const T, stage: u32, step: usize, c: usize) {
        let es = size_of::<T>();
        let (s, e) = self.range(c);
        ctx.pieces.clear();
        for k in 0..piece_count(s, e, self.net) {
            let (ps, pe) = piece(s, e, self.net, k);
            ctx.pieces.push(Piece {
                header: self.header(stage, step, k, ps * es, (pe - ps) * es),
                meta: None,
                // SAFETY: ps <= n
                ptr: unsafe { base.add(ps) } as *const u8,
                len: (pe - ps) * es,
            });
        }
    }

    fn run_raw<T: Element>(&self, ctx: &mut OpContext, base: *mut T) -> Result<(), RingError> {
        let es = size_of::<T>();
        let op = self.op.op;
        for step in 0..self.w - 1 {
            self.push_raw_pieces(ctx, base, 0, step, self.tx_chunk(step));
            self.submit(ctx)?;
            let (s, e) = self.range(self.rx_chunk(step));
            for k in 0..piece_count(s, e, self.net) {
                let (ps, pe) = piece(s, e, self.net, k);
                let (_, _, data) = self.recv_piece(ctx, self.header(0, step, k, ps * es, (pe - ps) * es), false)?;
                // SAFETY: the receive chunk is disjoint from the chunk in flight
                let local = unsafe { std::slice::from_raw_parts_mut(base.add(ps), pe - ps) };
                accumulate_bytes(local, &data, op);
            }
            self.wait_send(ctx)?;
        }
        for step in 0..self.w - 1 {
            self.push_raw_pieces(ctx, base, 1, step, self.gather_chunk(step));
            self.submit(ctx)?;
            let (s, e) = self.range((self.gather_chunk(step) + self.w - 1) % self.w);
            for k in 0..piece_count(s, e, self.net) {
                let (ps, pe) = piece(s, e, self.net, k);
                let (_, _, data) = self.recv_piece(ctx, self.header(1, step, k, ps * es, (pe - ps) * es), false)?;
                // SAFETY: as above; lengths were validated against the header
                unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), base.add(ps) as *mut u8, data.len()) };
            }
            self.wait_send(ctx)?;
        }
        Ok(())
    }

    /// Quantizes chunk `c` into staging and queues it. With `adopt`, the
    /// local values are replaced by what the receivers will reconstruct.
    fn push_quant_pieces(
        &self,
        ctx: &mut OpContext,
        base: *mut f32,
        stage: u32,
        step: usize,
        c: usize,
        adopt: bool,
    ) -> Result<(), RingError> {
        let (s, e) = self.range(c);
        let sp = ctx.staging.as_mut_ptr();
        ctx.pieces.clear();
        for k in 0..piece_count(s, e, self.net) {
            let (ps, pe) = piece(s, e, self.net, k);
            // SAFETY: ranges lie inside the buffer and inside staging, which
            // holds at least one full rank chunk
            let (vals, q) = unsafe {
                (
                    std::slice::from_raw_parts_mut(base.add(ps), pe - ps),
                    std::slice::from_raw_parts_mut(sp.add(ps - s), pe - ps),
                )
            };
            let p = quant::quantize(vals, q)?;
            if adopt {
                quant::dequantize(p, q, vals);
            }
            let header = self.header(stage, step, k, ps * 4, pe - ps);
            ctx.pieces.push(Piece {
                header,
                meta: Some(self.meta(header.chunk_index, p)),
                ptr: q.as_ptr(),
                len: pe - ps,
            });
        }
        Ok(())
    }

    fn run_quant(&self, ctx: &mut OpContext, base: *mut f32) -> Result<(), RingError> {
        let op = self.op.op;
        let max_chunk = self.range(0).1 - self.range(0).0;
        ctx.staging.clear();
        ctx.staging.resize(max_chunk.max(1), 0);

        // every contribution enters the ring as its own dequantized image
        // SAFETY: base covers n elements
        let all = unsafe { std::slice::from_raw_parts(base as *const f32, self.n) };
        quant::check_finite(all)?;
        for c in 0..self.w {
            let (s, e) = self.range(c);
            for k in 0..piece_count(s, e, self.net) {
                let (ps, pe) = piece(s, e, self.net, k);
                let vals = unsafe { std::slice::from_raw_parts_mut(base.add(ps), pe - ps) };
                quant::round_trip_in_place(vals, &mut ctx.staging[..pe - ps])?;
            }
        }

        for step in 0..self.w - 1 {
            self.push_quant_pieces(ctx, base, 0, step, self.tx_chunk(step), false)?;
            self.submit(ctx)?;
            let (s, e) = self.range(self.rx_chunk(step));
            for k in 0..piece_count(s, e, self.net) {
                let (ps, pe) = piece(s, e, self.net, k);
                let (p, _, data) = self.recv_piece(ctx, self.header(0, step, k, ps * 4, pe - ps), true)?;
                let p = p.expect("meta requested");
                let local = unsafe { std::slice::from_raw_parts_mut(base.add(ps), pe - ps) };
                for (l, &b) in local.iter_mut().zip(data.iter()) {
                    *l = f32::combine(*l, p.dequantize_one(b), op);
                }
            }
            self.wait_send(ctx)?;
        }

        for step in 0..self.w - 1 {
            let cur = step % 2;
            if step == 0 {
                self.push_quant_pieces(ctx, base, 1, 0, self.gather_chunk(0), true)?;
            } else {
                // forward the received bytes untouched so every rank ends up
                // with the owner's reconstruction
                let prev = 1 - cur;
                let (s, e) = self.range(self.gather_chunk(step));
                ctx.pieces.clear();
                for k in 0..ctx.held[prev].len() {
                    let (ps, pe) = piece(s, e, self.net, k);
                    let (m, b) = &ctx.held[prev][k];
                    let header = self.header(1, step, k, ps * 4, pe - ps);
                    ctx.pieces.push(Piece {
                        header,
                        meta: Some(QuantMetaMsg {
                            chunk_index: header.chunk_index,
                            ..*m
                        }),
                        ptr: b.as_ptr(),
                        len: b.len(),
                    });
                }
            }
            self.submit(ctx)?;
            let (s, e) = self.range((self.gather_chunk(step) + self.w - 1) % self.w);
            for k in 0..piece_count(s, e, self.net) {
                let (ps, pe) = piece(s, e, self.net, k);
                let (p, m, data) = self.recv_piece(ctx, self.header(1, step, k, ps * 4, pe - ps), true)?;
                let vals = unsafe { std::slice::from_raw_parts_mut(base.add(ps), pe - ps) };
                quant::dequantize(p.expect("meta requested"), &data, vals);
                ctx.held[cur].push((m, data));
            }
            self.wait_send(ctx)?;
            ctx.held[1 - cur].clear();
        }
        Ok(())
    }
}
