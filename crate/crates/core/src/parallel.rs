//! Deterministic chunked execution.
//!
//! Work is split into fixed-size chunks and partial results are combined
//! in chunk order, so the floating-point reduction tree depends only on
//! the input size, never on how many threads ran. `MRTL_THREADS` caps the
//! worker count (default: available parallelism).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

/// Samples per chunk. Constant so that reductions are reproducible.
pub const CHUNK: usize = 512;

pub fn thread_cap() -> usize {
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        match std::env::var("MRTL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(n) if n >= 1 => n.min(hw),
            _ => hw,
        }
    })
}

/// Maps `work` over `0..n` in fixed chunks and folds the per-chunk results
/// in chunk order. `work` receives the half-open sample range of one chunk.
pub fn chunked_reduce<T, F>(n: usize, work: F, fold: impl Fn(T, T) -> T, identity: T) -> T
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    if n == 0 {
        return identity;
    }
    let n_chunks = n.div_ceil(CHUNK);
    let threads = thread_cap().min(n_chunks);

    let run_chunk = |c: usize| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        work(lo..hi)
    };

    if threads <= 1 {
        let mut acc = identity;
        for c in 0..n_chunks {
            acc = fold(acc, run_chunk(c));
        }
        return acc;
    }

    let next = AtomicUsize::new(0);
    let mut parts: Vec<(usize, T)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let c = next.fetch_add(1, Ordering::Relaxed);
                        if c >= n_chunks {
                            break;
                        }
                        local.push((c, run_chunk(c)));
                    }
                    local
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    parts.sort_by_key(|(c, _)| *c);

    let mut acc = identity;
    for (_, part) in parts {
        acc = fold(acc, part);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_covers_all_indices() {
        let total = chunked_reduce(
            1300,
            |range| range.map(|i| i as u64).sum::<u64>(),
            |a, b| a + b,
            0u64,
        );
        assert_eq!(total, (0..1300u64).sum::<u64>());
    }

    #[test]
    fn empty_input_returns_identity() {
        let total = chunked_reduce(0, |_| 1u64, |a, b| a + b, 0u64);
        assert_eq!(total, 0);
    }
}
