//! Worker-count-invariant parallel map over index ranges.

/// Maps `f` over `0..n` and returns results in index order. With the
/// `parallel` feature and `workers > 1` the range is sharded across a
/// dedicated thread pool; output never depends on `workers`.
pub(crate) fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 && n > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    (0..n).map(f).collect()
}

/// Default worker count: `PVR_WORKERS` if set, else 1.
pub fn default_workers() -> usize {
    std::env::var("PVR_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}
