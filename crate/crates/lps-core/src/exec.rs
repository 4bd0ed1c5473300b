//! Data-parallel execution helpers.
//!
//! The hot loops in this crate (per-chunk gradient shards, evaluation
//! episodes, demo generation, sweep points) are embarrassingly parallel over
//! an index range. `map_indexed` fans them out over rayon when the `parallel`
//! feature is enabled and falls back to a plain loop otherwise.
//!
//! Determinism contract: callers split work into a fixed number of units and
//! combine results in index order, so the parallel and sequential paths are
//! bitwise identical. The reduction order never depends on thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is on.
/// Exists so the bench suite can compare both paths in one binary; not
/// intended for library callers.
pub fn set_force_sequential(force: bool) {
    #[cfg(feature = "parallel")]
    FORCE_SEQUENTIAL.store(force, Ordering::SeqCst);
    #[cfg(not(feature = "parallel"))]
    let _ = force;
}

/// `(0..n).map(f)` collected in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Number of gradient shards a batch is split into. Fixed (not tied to
/// thread count) so that results do not depend on the machine.
pub const GRAD_SHARDS: usize = 8;

/// Split `n` items into up to `GRAD_SHARDS` contiguous ranges of near-equal
/// size. Returns (start, end) pairs covering 0..n in order.
pub fn shard_ranges(n: usize) -> Vec<(usize, usize)> {
    let shards = GRAD_SHARDS.min(n.max(1));
    let base = n / shards;
    let extra = n % shards;
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        out.push((start, start + len));
        start += len;
    }
    debug_assert_eq!(start, n);
    out
}
