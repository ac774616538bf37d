//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it, or when
//! sequential mode is switched on at runtime, they run on the calling thread.
//! Work is always split into the same fixed chunks, so results do not depend
//! on the number of worker threads.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Rows handed to one task by [`for_each_chunk_mut`] and friends.
pub const CHUNK_ROWS: usize = 256;

/// Force every helper in this module onto the calling thread.
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || SEQUENTIAL.load(Ordering::Relaxed)
}

/// Evaluate `f(i)` for `i in 0..n` and collect in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Call `f(row_index, row)` for every `row_len`-sized row of `data`.
pub fn for_each_row_mut<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    for_each_chunk_mut(data, row_len, |first, chunk| {
        for (k, row) in chunk.chunks_mut(row_len).enumerate() {
            f(first + k, row);
        }
    });
}

/// Call `f(first_row, chunk)` on blocks of [`CHUNK_ROWS`] rows.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 || data.is_empty() {
        return;
    }
    let step = CHUNK_ROWS * row_len;
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        data.par_chunks_mut(step)
            .enumerate()
            .for_each(|(c, chunk)| f(c * CHUNK_ROWS, chunk));
        return;
    }
    for (c, chunk) in data.chunks_mut(step).enumerate() {
        f(c * CHUNK_ROWS, chunk);
    }
}

/// Compute one partial result per row block, then fold them in block order.
pub fn chunked_reduce<U, F, R>(rows: usize, map: F, init: U, mut fold: R) -> U
where
    U: Send,
    F: Fn(std::ops::Range<usize>) -> U + Sync + Send,
    R: FnMut(U, U) -> U,
{
    let blocks = rows.div_ceil(CHUNK_ROWS);
    let partials = map_range(blocks, |b| {
        let lo = b * CHUNK_ROWS;
        map(lo..(lo + CHUNK_ROWS).min(rows))
    });
    let mut acc = init;
    for p in partials {
        acc = fold(acc, p);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(1000, |i| i * 3);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 3 * i));
    }

    #[test]
    fn rows_visit_every_index_once() {
        let mut data = vec![0usize; 3 * 700];
        for_each_row_mut(&mut data, 3, |i, row| row.iter_mut().for_each(|x| *x = i));
        for (i, row) in data.chunks(3).enumerate() {
            assert!(row.iter().all(|&x| x == i));
        }
    }

    #[test]
    fn reduce_matches_sequential_sum() {
        let total = chunked_reduce(1234, |r| r.map(|i| i as u64).sum::<u64>(), 0, |a, b| a + b);
        assert_eq!(total, (0..1234u64).sum());
    }
}
