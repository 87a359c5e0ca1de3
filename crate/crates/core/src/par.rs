//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces bit-identical results for any thread count: work items
//! write disjoint outputs and reductions happen afterwards in index order.
//! With the `parallel` feature disabled, or with one thread configured, the
//! loops run inline on the caller's thread.
//!
//! The thread count comes from `METADR_THREADS` (default 1) and can be changed
//! at runtime with [`set_threads`].

use std::sync::atomic::{AtomicUsize, Ordering};

/// Environment variable capping kernel parallelism.
pub const THREADS_ENV: &str = "METADR_THREADS";

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Current thread budget for kernels (at least 1).
pub fn threads() -> usize {
    match THREADS.load(Ordering::Relaxed) {
        0 => {
            let n = std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or(1);
            THREADS.store(n, Ordering::Relaxed);
            n
        }
        n => n,
    }
}

/// Override the thread budget; `0` re-reads the environment on next use.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

/// True when the crate was built with rayon support.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
mod pool {
    use std::sync::{Arc, Mutex, OnceLock};

    use rayon::ThreadPool;

    static POOLS: OnceLock<Mutex<Vec<(usize, Arc<ThreadPool>)>>> = OnceLock::new();

    pub fn get(n: usize) -> Arc<ThreadPool> {
        let pools = POOLS.get_or_init(|| Mutex::new(Vec::new()));
        let mut pools = pools.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, p)) = pools.iter().find(|(k, _)| *k == n) {
            return p.clone();
        }
        let pool = Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .thread_name(|i| format!("metadr-worker-{i}"))
                .build()
                .expect("failed to build rayon pool"),
        );
        pools.push((n, pool.clone()));
        pool
    }
}

/// Calls `f(i, chunk)` for consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        let n = threads();
        if n > 1 && data.len() > chunk_len {
            use rayon::prelude::*;
            pool::get(n).install(|| {
                data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            });
            return;
        }
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, possibly in parallel; output order is by index.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let t = threads();
        if t > 1 && n > 1 {
            use rayon::prelude::*;
            return pool::get(t).install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_match_sequential() {
        let mut a = vec![0u64; 1000];
        let mut b = vec![0u64; 1000];
        set_threads(1);
        for_each_chunk_mut(&mut a, 7, |i, c| c.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 7 + j) as u64 * 3));
        set_threads(4);
        for_each_chunk_mut(&mut b, 7, |i, c| c.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 7 + j) as u64 * 3));
        set_threads(0);
        assert_eq!(a, b);
        assert_eq!(map_indexed(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
