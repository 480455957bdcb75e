//! Scoped-thread parallel map used for per-window model evaluations.
//!
//! The worker count is capped by the `SYNCDIFF_THREADS` environment variable
//! (default: available parallelism). Work items are pure functions of their
//! index, and every result lands in its own slot, so the output — and, with
//! counter-based noise streams, the entire engine — is bitwise identical for
//! any thread count. On wasm targets everything runs sequentially.

pub const THREADS_ENV: &str = "SYNCDIFF_THREADS";

/// Worker cap: `SYNCDIFF_THREADS` if set to a positive integer, otherwise
/// the machine's available parallelism.
pub fn max_threads() -> usize {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Parallel map over `items` preserving order. `f` receives (index, item).
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    par_map_with(max_threads(), items, f)
}

pub fn par_map_with<T, R, F>(threads: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n = items.len();
    let threads = threads.clamp(1, n.max(1));
    if threads <= 1 || cfg!(target_arch = "wasm32") {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (ci, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let start = ci * chunk;
                for (k, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(start + k, &items[start + k]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("all slots filled")).collect()
}

/// Tests that mutate `SYNCDIFF_THREADS` must hold this lock so they don't
/// race each other under the parallel test runner.
#[cfg(test)]
pub(crate) fn test_env_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
