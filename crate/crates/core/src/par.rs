//! Ordered data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature, work is spread over a dedicated rayon pool of
//! `workers` threads; results always come back in input order. With the
//! feature off, or `workers <= 1`, items are processed one after another on the
//! calling thread.

/// Apply `f` to every item, returning results in input order.
pub fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers > 1 && items.len() > 1 {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                Ok(pool) => return pool.install(|| items.par_iter().map(&f).collect()),
                Err(e) => log::warn!("falling back to sequential execution: {e}"),
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    items.iter().map(f).collect()
}

/// Default worker count when none is configured.
pub const DEFAULT_WORKERS: usize = 4;

/// Whether this build can actually run work in parallel.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
