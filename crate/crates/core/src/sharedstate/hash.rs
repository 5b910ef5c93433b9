//! `simplehash`: a 256-lane FNV-1a over little-endian 32-bit words, folded
//! by a fixed binary tree. The lane layout makes the result independent of how
//! many threads process the lanes.

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
pub const LANES: usize = 256;
const ROW_BYTES: usize = LANES * 4;

/// Buffers below this size are hashed on the calling thread.
const PARALLEL_MIN_BYTES: usize = 1 << 20;

#[inline]
fn fnv_step(h: u64, word: u32) -> u64 {
    (h ^ word as u64).wrapping_mul(FNV_PRIME)
}

#[inline]
pub fn combine(a: u64, b: u64) -> u64 {
    (a ^ b.rotate_left(27)).wrapping_mul(FNV_PRIME)
}

fn fold(lanes: &mut [u64; LANES]) -> u64 {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            lanes[i] = combine(lanes[2 * i], lanes[2 * i + 1]);
        }
    }
    lanes[0]
}

/// Loop-only single-threaded definition. Ground truth for [`simplehash`].
pub fn simplehash_reference(buf: &[u8]) -> u64 {
    let mut lanes = [FNV_OFFSET_BASIS; LANES];
    let n_words = buf.len().div_ceil(4);
    for i in 0..n_words {
        let mut w = [0u8; 4];
        for (k, slot) in w.iter_mut().enumerate() {
            if let Some(&b) = buf.get(i * 4 + k) {
                *slot = b;
            }
        }
        let lane = i % LANES;
        lanes[lane] = fnv_step(lanes[lane], u32::from_le_bytes(w));
    }
    // pairwise tree, written out level by level
    let mut level: Vec<u64> = lanes.to_vec();
    while level.len() > 1 {
        level = level.chunks(2).map(|p| combine(p[0], p[1])).collect();
    }
    level[0] ^ buf.len() as u64
}

/// Runs lanes `lo..hi` over every row of `buf`.
fn hash_band(buf: &[u8], lo: usize, hi: usize, out: &mut [u64]) {
    debug_assert_eq!(out.len(), hi - lo);
    out.fill(FNV_OFFSET_BASIS);
    let full_rows = buf.len() / ROW_BYTES;
    for r in 0..full_rows {
        let row = &buf[r * ROW_BYTES + lo * 4..r * ROW_BYTES + hi * 4];
        for (h, w) in out.iter_mut().zip(row.chunks_exact(4)) {
            *h = fnv_step(*h, u32::from_le_bytes([w[0], w[1], w[2], w[3]]));
        }
    }
    // final partial row: words exist for lanes whose start byte is in range
    let tail = &buf[full_rows * ROW_BYTES..];
    for (k, h) in out.iter_mut().enumerate() {
        let start = (lo + k) * 4;
        if start >= tail.len() {
            break;
        }
        let mut w = [0u8; 4];
        let end = (start + 4).min(tail.len());
        w[..end - start].copy_from_slice(&tail[start..end]);
        *h = fnv_step(*h, u32::from_le_bytes(w));
    }
}

/// Hash with an explicit worker count; every count gives the same value.
pub fn simplehash_with_workers(buf: &[u8], workers: usize) -> u64 {
    let workers = workers.clamp(1, LANES);
    let mut lanes = [0u64; LANES];
    if workers == 1 {
        hash_band(buf, 0, LANES, &mut lanes);
    } else {
        std::thread::scope(|s| {
            let mut rest: &mut [u64] = &mut lanes;
            let mut lo = 0;
            for k in 0..workers {
                let hi = (k + 1) * LANES / workers;
                let (band, tail) = rest.split_at_mut(hi - lo);
                rest = tail;
                let start = lo;
                s.spawn(move || hash_band(buf, start, hi, band));
                lo = hi;
            }
        });
    }
    fold(&mut lanes) ^ buf.len() as u64
}

/// Hash using the available hardware parallelism for large buffers.
pub fn simplehash(buf: &[u8]) -> u64 {
    let workers = if buf.len() < PARALLEL_MIN_BYTES {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get().min(8))
    };
    simplehash_with_workers(buf, workers)
}
