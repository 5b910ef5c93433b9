//! Caching pool of receive buffers. After warm-up, steady-state traffic is
//! served entirely from recycled allocations.

use std::ops::{Deref, DerefMut};
use std::sync::{Arc, Mutex};

#[derive(Debug, Default)]
struct State {
    free: Vec<Vec<u8>>,
    /// Buffers currently on loan.
    outstanding: usize,
    /// Sum of live reservations.
    reserved: usize,
}

#[derive(Debug)]
pub struct BufferPool {
    state: Mutex<State>,
    buf_capacity: usize,
}

/// Idle buffers always kept; reservations can raise it.
const KEEP_IDLE: usize = 1024;

impl BufferPool {
    pub fn new(buf_capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(State {
                free: Vec::with_capacity(64),
                ..Default::default()
            }),
            buf_capacity,
        })
    }

    /// Grows the pool to at least the sum of all live reservations, counting
    /// buffers on loan. Loans taken before the reservation are assumed to
    /// belong to it: a ring predecessor routinely delivers the first frames
    /// of an operation before the local side has reserved.
    pub fn reserve(self: &Arc<Self>, count: usize) -> Reservation {
        let mut st = self.state.lock().unwrap();
        st.reserved += count;
        while st.free.len() + st.outstanding < st.reserved {
            st.free.push(Vec::with_capacity(self.buf_capacity));
        }
        Reservation {
            pool: Arc::clone(self),
            count,
        }
    }

    /// A buffer of exactly `len` bytes. Contents are unspecified.
    pub fn take(self: &Arc<Self>, len: usize) -> PooledBuf {
        let recycled = {
            let mut st = self.state.lock().unwrap();
            st.outstanding += 1;
            st.free.pop()
        };
        let mut buf = recycled.unwrap_or_else(|| Vec::with_capacity(self.buf_capacity.max(len)));
        if buf.capacity() < len {
            buf.reserve_exact(len - buf.len());
        }
        // every byte is overwritten by the socket read before use
        buf.resize(len, 0);
        PooledBuf {
            buf: Some(buf),
            pool: Arc::clone(self),
        }
    }

    /// Number of idle buffers held.
    pub fn idle(&self) -> usize {
        self.state.lock().unwrap().free.len()
    }

    fn give_back(&self, mut buf: Vec<u8>) {
        buf.clear();
        let mut st = self.state.lock().unwrap();
        st.outstanding -= 1;
        // bounded so a burst does not pin memory forever
        if st.free.len() < KEEP_IDLE.max(st.reserved) {
            st.free.push(buf);
        }
    }
}

/// Releases its share of the pool's reserved size on drop.
#[derive(Debug)]
pub struct Reservation {
    pool: Arc<BufferPool>,
    count: usize,
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.pool.state.lock().unwrap().reserved -= self.count;
    }
}

/// A buffer on loan from a [`BufferPool`]; returned on drop.
#[derive(Debug)]
pub struct PooledBuf {
    buf: Option<Vec<u8>>,
    pool: Arc<BufferPool>,
}

impl Deref for PooledBuf {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        self.buf.as_deref().unwrap()
    }
}

impl DerefMut for PooledBuf {
    fn deref_mut(&mut self) -> &mut [u8] {
        self.buf.as_deref_mut().unwrap()
    }
}

impl Drop for PooledBuf {
    fn drop(&mut self) {
        if let Some(b) = self.buf.take() {
            self.pool.give_back(b);
        }
    }
}
