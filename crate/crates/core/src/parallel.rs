//! Row-parallel evaluation with a deterministic result order.
//!
//! Work is split per output row and every row is reduced on a single thread,
//! so results are bit-identical regardless of the worker count. The worker
//! count is read from `DRIFT_THREADS`; `0` (the default) runs inline.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "DRIFT_THREADS";

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        if threads <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
    })
    .as_ref()
}

/// Number of worker threads in use (1 means inline).
pub fn worker_count() -> usize {
    pool().map_or(1, |p| p.current_num_threads())
}

/// Evaluate `f(i)` for `i in 0..n`, preserving order.
pub fn map_rows<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool() {
        Some(p) if n > 64 => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        _ => (0..n).map(f).collect(),
    }
}
