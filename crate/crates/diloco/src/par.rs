//! Execution helpers for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) the maps run on the rayon pool;
//! without it they fall back to plain sequential iteration. Results are
//! always collected in index order and any chunking is derived from the
//! problem size alone, never from the thread count, so both modes produce
//! bit-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_serial(n, f)
}

/// Sequential reference version of [`map_indexed`]. Always available; the
/// benchmarks use it to compare against the rayon path.
pub fn map_indexed_serial<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Number of accumulation chunks used when reducing over batch rows.
///
/// Fixed (independent of thread count) so that the summation tree, and hence
/// every floating-point result, is identical whether or not the map ran in
/// parallel.
pub const REDUCE_CHUNKS: usize = 8;

/// Split `0..n` into at most [`REDUCE_CHUNKS`] contiguous ranges of
/// near-equal size, in ascending order.
pub fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = n.min(REDUCE_CHUNKS);
    let base = n / chunks;
    let extra = n % chunks;
    let mut ranges = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        ranges.push(start..start + len);
        start += len;
    }
    ranges
}
