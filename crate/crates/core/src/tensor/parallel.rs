//! Worker-thread cap for the convolution kernels.
//!
//! Work is split into disjoint output blocks, each computed by exactly the
//! same sequential code, so results do not depend on the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Reads `DILSEG_THREADS`, defaulting to one worker.
pub fn init_from_env() {
    let n = std::env::var("DILSEG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1);
    set_threads(n);
}

/// Calls `f(block_index, block)` for each `block_len`-sized block of `out`.
pub(crate) fn for_each_block<F>(out: &mut [f64], block_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let blocks = out.len() / block_len;
    let workers = threads().min(blocks);
    if workers <= 1 {
        for (i, block) in out.chunks_mut(block_len).enumerate() {
            f(i, block);
        }
        return;
    }
    let per_worker = blocks.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, group) in out.chunks_mut(per_worker * block_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, block) in group.chunks_mut(block_len).enumerate() {
                    f(w * per_worker + j, block);
                }
            });
        }
    });
}
