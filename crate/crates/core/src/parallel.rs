//! Worker fan-out honouring `DIGEBENCH_THREADS` (0 = serial).
//!
//! Results are collected in index order and every work item derives its own
//! RNG stream, so output never depends on the worker count.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "DIGEBENCH_THREADS";

fn configured_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok())
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| match configured_threads() {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new().num_threads(n).build().ok(),
        _ => None,
    })
    .as_ref()
}

/// Maps `f` over `0..n`, possibly in parallel, preserving order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match (configured_threads(), pool()) {
        (Some(0), _) => (0..n).map(f).collect(),
        (_, Some(p)) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        _ => (0..n).into_par_iter().map(f).collect(),
    }
}
