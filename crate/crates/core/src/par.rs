//! Data-parallel execution helpers with a sequential fallback.
//!
//! Compiled with the `parallel` feature (default) these fan work out over
//! rayon; without it they run plain sequential loops. Both paths produce
//! bit-identical results: work is only ever split along independent indices
//! (instances, batches, seeds, matrix rows), never across a floating-point
//! reduction, so the arithmetic order inside each unit of work is fixed.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `"parallel"` or `"sequential"`, for bench/report labels.
pub fn mode_name() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fallible variant of [`map_indexed`]; returns the first error by index
/// order semantics (any error aborts the whole map).
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Run `f` on disjoint output chunks of `out`, chunk `i` covering rows
/// `[i * rows_per_chunk, ...)` of a row-major matrix with `row_len` columns.
/// Used by the matrix kernels: each chunk is written by exactly one worker.
pub fn for_each_chunk<F>(out: &mut [f64], row_len: usize, rows_per_chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && rows_per_chunk > 0);
    let chunk_len = row_len * rows_per_chunk;
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i * rows_per_chunk, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i * rows_per_chunk, chunk));
    }
}
