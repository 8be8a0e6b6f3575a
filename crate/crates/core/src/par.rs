//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the work is spread over the current rayon
//! pool; a pool of one thread (or a build without the feature) takes the
//! plain iterator path. Work is always split into fixed-size pieces whose
//! boundaries do not depend on the thread count, and results come back in
//! index order, so outputs are identical for any number of workers.

/// Rows per work item for batched evaluation.
pub const CHUNK_ROWS: usize = 64;

/// Whether the calling context will actually run in parallel.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// `(0..count).map(f)`, possibly in parallel, collected in index order.
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(f).collect();
    }
    (0..count).map(f).collect()
}

/// Split `0..len` into consecutive ranges of at most `chunk` elements.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    assert!(chunk > 0, "chunk size must be positive");
    (0..len)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(len))
        .collect()
}

/// Run `f` over fixed chunks of `0..len`, returning per-chunk results in order.
pub fn map_chunks<U, F>(len: usize, chunk: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(std::ops::Range<usize>) -> U + Sync + Send,
{
    let ranges = chunk_ranges(len, chunk);
    map_indexed(ranges.len(), |i| f(ranges[i].clone()))
}
