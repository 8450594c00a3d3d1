//! Execution backend for the data-parallel kernels.
//!
//! Every kernel computes independent per-row (or per-item) results and then
//! reduces them sequentially in index order, so the parallel and sequential
//! backends produce bit-identical outputs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backend {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls
    /// back to sequential execution.
    Parallel,
}

impl Default for Backend {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Backend::Parallel
        } else {
            Backend::Sequential
        }
    }
}

impl Backend {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Backend::Parallel
    }
}

/// Evaluate `f(i)` for `i in 0..n`, results in index order.
pub fn map_indices<T, F>(backend: Backend, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if backend.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = backend;
    (0..n).map(f).collect()
}

/// Fill `out` row by row; `f(i, row)` writes row `i` of width `width`.
pub fn fill_rows<F>(backend: Backend, out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if backend.is_parallel() {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = backend;
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
