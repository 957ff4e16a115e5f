//! Runtime thread-count control shared by every kernel.
//!
//! Kernels are written twice: a rayon path (compiled under the `parallel`
//! feature) and a plain sequential path. `set_threads(1)` forces the
//! sequential path even when the feature is on, which is what makes a run
//! bit-reproducible, since the sequential path fixes every accumulation
//! order. The parallel paths are engineered to reduce in a fixed order
//! wherever that is cheap (per-view partial volumes summed by view index),
//! so in practice the two paths agree far tighter than the documented
//! 1e-12 relative bound.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Configure kernel threading. 0 leaves the current setting untouched,
/// 1 forces the sequential path, larger values size the rayon pool (best
/// effort, the global pool can only be built once per process).
pub fn set_threads(n: usize) {
    match n {
        0 => {}
        1 => FORCE_SEQUENTIAL.store(true, Ordering::Relaxed),
        _ => {
            FORCE_SEQUENTIAL.store(false, Ordering::Relaxed);
            #[cfg(feature = "parallel")]
            {
                // Ignore the error when a pool already exists.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

/// True when kernels will take the fixed-order sequential path, either by
/// request or because the crate was built without the `parallel` feature.
pub fn sequential_forced() -> bool {
    !parallel_enabled()
}

#[cfg(feature = "parallel")]
pub(crate) fn parallel_enabled() -> bool {
    !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn parallel_enabled() -> bool {
    false
}

/// Chunk length for fixed-partition parallel scatters. Independent of the
/// worker count so the partition (and therefore the reduction tree input)
/// does not change with the pool size.
pub(crate) fn scatter_chunk_len(total: usize) -> usize {
    const CHUNKS: usize = 32;
    total.div_ceil(CHUNKS).max(1)
}
