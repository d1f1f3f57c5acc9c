//! Indexed map over trial batches, parallel when the `parallel` feature is
//! enabled. Results are collected in index order either way, so callers see
//! identical output regardless of execution mode or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for a verification batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Use the rayon thread pool when compiled in; otherwise falls back to
    /// sequential execution.
    Parallel,
    Sequential,
}

/// Applies `f` to `0..n`, returning results ordered by index.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => (0..n).map(f).collect(),
    }
}
