//! Worker pool shared by the sampling loops.
//!
//! `NMM_THREADS` caps the worker count. Work is always reduced in index
//! order, so results do not depend on it.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("NMM_THREADS")
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// `f(0..n)` on the pool, results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    pool().install(|| (0..n).into_par_iter().map(f).collect())
}
