//! Data-parallel helpers.
//!
//! Kernels split their work into independent chunks whose per-scalar reduction order does not
//! depend on the chunking, so the parallel and sequential paths produce identical results. The
//! parallel path is compiled only with the `parallel` feature and is switched on at runtime with
//! [`set_parallel`]; the default is the single-threaded deterministic path.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables or disables the rayon path. A no-op without the `parallel` feature.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Reads `HSEG_THREADS`: unset or 0 keeps the sequential path, n > 0 builds an n-thread global
/// pool and enables the parallel path. Returns the thread count in effect.
pub fn init_from_env() -> usize {
    let threads = std::env::var("HSEG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    configure(threads)
}

pub fn configure(threads: usize) -> usize {
    if threads == 0 || !cfg!(feature = "parallel") {
        set_parallel(false);
        return 1;
    }
    #[cfg(feature = "parallel")]
    {
        // The global pool can only be built once; later calls keep the first size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        set_parallel(true);
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    unreachable!()
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Runs `f` with the parallel flag set to `on`, restoring the previous value afterwards.
pub fn with_parallel<R>(on: bool, f: impl FnOnce() -> R) -> R {
    let prev = is_parallel();
    set_parallel(on);
    let out = f();
    set_parallel(prev);
    out
}
