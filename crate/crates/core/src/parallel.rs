//! Order-preserving fan-out over scoped threads.

use std::num::NonZeroUsize;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "SEQ2SEG_THREADS";

/// Workers to use: `SEQ2SEG_THREADS` when set to a positive integer,
/// otherwise the available parallelism.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, NonZeroUsize::get);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

/// Applies `f` to every item and returns the results in input order.
///
/// Items are split into contiguous chunks, one per worker, so the result is
/// independent of the worker count.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
