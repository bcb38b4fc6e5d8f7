//! Bounded worker pool for per-neuron jobs. Results come back in job order
//! whatever the scheduling, so outputs do not depend on the thread count.

use rayon::prelude::*;

/// Environment variable consulted when `--jobs` is not given.
pub const JOBS_ENV: &str = "CTXMOD_JOBS";

pub fn resolve_jobs(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var(JOBS_ENV).ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f(0..n)` on `jobs` threads and returns the results in index order.
pub fn run_indexed<T, F>(jobs: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}
