//! Worker-thread control.
//!
//! `LAVIN_THREADS` caps the rayon pool (0 or 1 selects the serial path).
//! Kernels only ever parallelize over disjoint output chunks whose inner
//! summation order is fixed, so results are bit-identical at every thread
//! count; the env var exists for the reproducibility contract and for
//! benchmarking.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Effective worker count for this process.
pub fn worker_count() -> usize {
    *THREADS.get_or_init(|| {
        let n = match std::env::var("LAVIN_THREADS") {
            Ok(v) => v.trim().parse::<usize>().unwrap_or(1),
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        if n > 1 {
            // Ignore failure: the pool may already be configured by the host.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        n.max(1)
    })
}

/// Run `body(chunk_index, chunk)` over equal output chunks, in parallel when
/// the pool has more than one worker. Each chunk is written by exactly one
/// call, so the result does not depend on scheduling.
pub fn for_each_chunk_mut<T: Send, F>(data: &mut [T], chunk_len: usize, body: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    if worker_count() <= 1 || data.len() <= chunk_len {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            body(i, chunk);
        }
    } else {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, chunk)| body(i, chunk));
    }
}
