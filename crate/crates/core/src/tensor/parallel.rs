//! Optional batch-level parallelism for the heavy kernels.
//!
//! The worker count comes from the `GFR_THREADS` environment variable
//! (default 1). Work is split into contiguous chunks and results come back in
//! item order, so reductions over the batch run in the same order whatever
//! the thread count.

use std::sync::OnceLock;

pub const THREADS_VAR: &str = "GFR_THREADS";

/// Parses a `GFR_THREADS` value; anything invalid or zero means 1.
pub fn parse_threads(value: Option<&str>) -> usize {
    value
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn max_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| parse_threads(std::env::var(THREADS_VAR).ok().as_deref()))
}

/// `(0..n).map(f)` evaluated on up to [`max_threads`] scoped workers.
pub fn map_items<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = max_threads().min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("kernel worker panicked"))
            .collect()
    })
}
