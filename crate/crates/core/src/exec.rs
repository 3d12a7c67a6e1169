//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits work by index, never by thread, so the parallel and
//! sequential paths produce identical results, bit for bit. Reductions are
//! done over fixed-size chunks whose partial results are combined in chunk
//! order.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with all helpers in this module forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(FORCE_SEQUENTIAL.with(|c| c.replace(true)));
    f()
}

/// Whether helpers called from this thread will fan out to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Fills `out[i] = f(i)` over fixed-size blocks.
pub fn fill<T, F>(out: &mut [T], block: usize, f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let block = block.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() && out.len() > block {
        use rayon::prelude::*;
        out.par_chunks_mut(block).enumerate().for_each(|(b, chunk)| {
            for (j, slot) in chunk.iter_mut().enumerate() {
                *slot = f(b * block + j);
            }
        });
        return;
    }
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Chunk length used by [`chunked_reduce`] for `n` items. Depends on `n` only.
pub fn reduce_chunk_len(n: usize) -> usize {
    const MIN_CHUNK: usize = 1024;
    const MAX_CHUNKS: usize = 64;
    MIN_CHUNK.max(n.div_ceil(MAX_CHUNKS))
}

/// Folds `0..n` in chunks of [`reduce_chunk_len`] and merges the partial
/// accumulators left to right.
pub fn chunked_reduce<A, Init, Fold, Merge>(n: usize, init: Init, fold: Fold, merge: Merge) -> A
where
    A: Send,
    Init: Fn() -> A + Sync + Send,
    Fold: Fn(&mut A, usize) + Sync + Send,
    Merge: Fn(&mut A, A),
{
    let len = reduce_chunk_len(n);
    let chunks = n.div_ceil(len);
    let partial = |c: usize| {
        let mut acc = init();
        for i in c * len..((c + 1) * len).min(n) {
            fold(&mut acc, i);
        }
        acc
    };
    let mut parts = map_range(chunks, partial).into_iter();
    let mut total = parts.next().unwrap_or_else(&init);
    for p in parts {
        merge(&mut total, p);
    }
    total
}
