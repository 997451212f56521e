//! Deterministic data-parallel helpers.
//!
//! Every parallel loop in the crate runs over a *fixed* work partition:
//! chunk boundaries depend only on the problem shape, never on the number
//! of worker threads. Each chunk writes to a disjoint output slice and all
//! cross-chunk reductions are performed sequentially in chunk order. As a
//! consequence the `parallel` feature (and the runtime
//! [`force_sequential`] switch used by the benchmark suite) change wall
//! time only — results are bitwise identical.

use std::sync::atomic::{AtomicBool, Ordering};

/// Fixed element chunk for element-wise maps. Never derived from the
/// thread count (that would change the partition and, for reductions, the
/// rounding); 16 KiB of f64 per chunk amortizes scheduling overhead.
pub(crate) const MAP_CHUNK: usize = 2048;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto the sequential code path at runtime.
///
/// Used by the benchmark suite to compare the rayon dispatch against plain
/// loops within a single compiled binary. With the `parallel` feature
/// disabled this is a no-op (the build is already sequential).
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// Whether kernels currently run sequentially.
pub fn is_sequential() -> bool {
    if cfg!(not(feature = "parallel")) {
        return true;
    }
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Configure the global worker pool size.
///
/// `None` consults the `SDDG_THREADS` environment variable, falling back to
/// the rayon default (one worker per logical CPU). Calling this more than
/// once is harmless: later calls keep the existing pool.
pub fn init_threads(n: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        let n = n.or_else(|| {
            std::env::var("SDDG_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
        });
        if let Some(n) = n.filter(|&n| n > 0) {
            // Ignore the error: the global pool can only be built once.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Run `f(chunk_index, chunk)` over `data` split into `chunk_len`-sized
/// chunks (the last chunk may be shorter). Chunks may run concurrently.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Run `f(i)` for `i in 0..n`, possibly concurrently. The work done by each
/// index must be independent (disjoint writes).
pub(crate) fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        (0..n).into_par_iter().for_each(f);
        return;
    }
    for i in 0..n {
        f(i);
    }
}

/// Map `i in 0..n` to values, collected in index order (deterministic),
/// possibly computing the values concurrently.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
