//! Element types, chunk partitioning and element-wise reduction.

use crate::types::{Dtype, ReduceOp};

/// Numeric element that can travel through an all-reduce.
pub trait Element: bytemuck::Pod + Send + Sync + PartialOrd + std::fmt::Debug + 'static {
    const DTYPE: Dtype;

    fn combine(local: Self, received: Self, op: ReduceOp) -> Self;

    /// Division by the world size used by [`ReduceOp::Avg`].
    fn div_world(self, world: u32) -> Self;
}

#[inline]
fn pick_max<T: PartialOrd>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

#[inline]
fn pick_min<T: PartialOrd>(a: T, b: T) -> T {
    if b < a {
        b
    } else {
        a
    }
}

macro_rules! float_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $d;

            #[inline]
            fn combine(local: Self, received: Self, op: ReduceOp) -> Self {
                match op {
                    ReduceOp::Sum | ReduceOp::Avg => local + received,
                    ReduceOp::Max => pick_max(local, received),
                    ReduceOp::Min => pick_min(local, received),
                }
            }

            #[inline]
            fn div_world(self, world: u32) -> Self {
                self / world as $t
            }
        }
    };
}

macro_rules! int_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $d;

            #[inline]
            fn combine(local: Self, received: Self, op: ReduceOp) -> Self {
                match op {
                    ReduceOp::Sum | ReduceOp::Avg => local.wrapping_add(received),
                    ReduceOp::Max => pick_max(local, received),
                    ReduceOp::Min => pick_min(local, received),
                }
            }

            #[inline]
            fn div_world(self, world: u32) -> Self {
                self / world as $t
            }
        }
    };
}

float_element!(f32, Dtype::F32);
float_element!(f64, Dtype::F64);
int_element!(i32, Dtype::I32);
int_element!(i64, Dtype::I64);
int_element!(u8, Dtype::U8);

/// Per-rank element ranges. The first `n % w` ranks get one extra element.
pub fn chunk_boundaries(n: usize, world: usize) -> Vec<(usize, usize)> {
    assert!(world >= 1, "world size must be at least 1");
    let base = n / world;
    let extra = n % world;
    let mut out = Vec::with_capacity(world);
    let mut start = 0;
    for r in 0..world {
        let len = base + usize::from(r < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Range of rank chunk `c` without allocating.
#[inline]
pub fn chunk_range(n: usize, world: usize, c: usize) -> (usize, usize) {
    let base = n / world;
    let extra = n % world;
    let start = c * base + c.min(extra);
    (start, start + base + usize::from(c < extra))
}

/// `local[i] = local[i] op received[i]`.
#[inline]
pub fn accumulate<T: Element>(local: &mut [T], received: &[T], op: ReduceOp) {
    debug_assert_eq!(local.len(), received.len());
    for (l, &r) in local.iter_mut().zip(received) {
        *l = T::combine(*l, r, op);
    }
}

/// Same as [`accumulate`] but reads `received` from possibly unaligned bytes.
pub fn accumulate_bytes<T: Element>(local: &mut [T], received: &[u8], op: ReduceOp) {
    let size = std::mem::size_of::<T>();
    debug_assert_eq!(local.len() * size, received.len());
    match bytemuck::try_cast_slice::<u8, T>(received) {
        Ok(r) => accumulate(local, r, op),
        Err(_) => {
            for (l, b) in local.iter_mut().zip(received.chunks_exact(size)) {
                *l = T::combine(*l, bytemuck::pod_read_unaligned(b), op);
            }
        }
    }
}

/// Post-gather step: `Avg` divides by the world size, other ops are no-ops.
pub fn finalize<T: Element>(buf: &mut [T], op: ReduceOp, world: u32) {
    if op == ReduceOp::Avg {
        for x in buf.iter_mut() {
            *x = x.div_world(world);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundaries_examples() {
        assert_eq!(chunk_boundaries(10, 3), vec![(0, 4), (4, 7), (7, 10)]);
        let b = chunk_boundaries(5, 8);
        assert_eq!(b.iter().filter(|(s, e)| e - s == 1).count(), 5);
        assert_eq!(b[5..], [(5, 5), (5, 5), (5, 5)]);
    }

    #[test]
    fn boundaries_large() {
        let n = 268_435_456usize;
        let b = chunk_boundaries(n, 18);
        let sizes: Vec<usize> = b.iter().map(|(s, e)| e - s).collect();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert_eq!(sizes.iter().filter(|&&s| s == 14_913_081).count(), 16);
        assert_eq!(sizes.iter().filter(|&&s| s == 14_913_080).count(), 2);
    }

    #[test]
    fn ops() {
        let mut a = [1.0f32, 1.0];
        accumulate(&mut a, &[2.0, 2.0], ReduceOp::Sum);
        assert_eq!(a, [3.0, 3.0]);
        let mut m = [0.0f32, 0.0];
        accumulate(&mut m, &[-1.0, 5.0], ReduceOp::Max);
        assert_eq!(m, [0.0, 5.0]);
        let mut s = [8.0f32];
        finalize(&mut s, ReduceOp::Sum, 4);
        assert_eq!(s, [8.0]);
        finalize(&mut s, ReduceOp::Avg, 4);
        assert_eq!(s, [2.0]);
    }

    #[test]
    fn unaligned_bytes_accumulate() {
        let vals = [1.5f32, -2.0, 3.25];
        let mut bytes = vec![0u8; 13];
        bytes[1..].copy_from_slice(bytemuck::cast_slice(&vals));
        let mut local = [1.0f32; 3];
        accumulate_bytes(&mut local, &bytes[1..], ReduceOp::Sum);
        assert_eq!(local, [2.5, -1.0, 4.25]);
    }

    proptest! {
        #[test]
        fn boundaries_partition(n in 0usize..100_000, w in 1usize..64) {
            let b = chunk_boundaries(n, w);
            prop_assert_eq!(b.len(), w);
            prop_assert_eq!(b[0].0, 0);
            prop_assert_eq!(b[w - 1].1, n);
            for k in 0..w {
                prop_assert_eq!(chunk_range(n, w, k), b[k]);
                if k > 0 {
                    prop_assert_eq!(b[k - 1].1, b[k].0);
                }
            }
            let sizes: Vec<usize> = b.iter().map(|(s, e)| e - s).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
