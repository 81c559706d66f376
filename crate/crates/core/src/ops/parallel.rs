//! Operator-level parallelism.
//!
//! `SCTNET_THREADS` caps the worker count; 0 (the default) runs everything
//! on the calling thread. Parallel paths split work so that every output
//! element is produced by the same arithmetic as the sequential path.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

const UNSET: usize = usize::MAX;
static OVERRIDE: AtomicUsize = AtomicUsize::new(UNSET);
static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

fn env_threads() -> usize {
    std::env::var("SCTNET_THREADS").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

/// Effective worker count (0 = sequential reference mode).
pub fn threads() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        UNSET => env_threads(),
        n => n,
    }
}

/// Overrides `SCTNET_THREADS` for this process. The pool itself is sized
/// on first use, so raising the count afterwards has no effect beyond it.
pub fn set_threads(n: usize) {
    OVERRIDE.store(n, Ordering::Relaxed);
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = threads().max(env_threads());
        if n == 0 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
    })
    .as_ref()
}

/// Runs `f(chunk_index, chunk)` over `data` split into `chunk` sized pieces,
/// in parallel when enabled.
pub(crate) fn for_each_chunk<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    let chunk = chunk.max(1);
    if threads() > 0 && data.len() > chunk {
        if let Some(pool) = pool() {
            use rayon::prelude::*;
            pool.install(|| data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
