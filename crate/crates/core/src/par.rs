//! Thin dispatch layer between the rayon data-parallel path and the
//! sequential fallback (`--no-default-features`).
//!
//! Every kernel in this crate partitions work so that each task owns a
//! disjoint output slice and performs its inner reductions in a fixed
//! order. Parallel and sequential execution are therefore bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(chunk_index, chunk)` over disjoint chunks of `data`.
#[inline]
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// `(0..n).map(f).collect()`, parallel when enabled. Order is preserved.
#[inline]
pub(crate) fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Whether the crate was built with the rayon path available.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Cap the global thread pool. `None` keeps the rayon default (machine
/// cores). Safe to call more than once; only the first call wins.
pub fn configure_threads(n: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
