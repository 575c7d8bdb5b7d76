//! Order-preserving parallel map for replicates and grid cells.

use rayon::prelude::*;

/// Environment variable that sets the default degree of parallelism.
pub const THREADS_ENV: &str = "CLION_THREADS";

/// Degree of parallelism from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Maps `f` over `items` on a pool of `threads` workers (rayon's global pool
/// when `None`). Results come back in input order regardless of scheduling.
pub fn par_map<T, R, F>(threads: Option<usize>, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match threads.or_else(threads_from_env) {
        Some(1) => items.into_iter().map(f).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(|| items.into_par_iter().map(&f).collect()),
        None => items.into_par_iter().map(f).collect(),
    }
}
