//! Execution-mode switch for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches onto the
//! rayon pool; without it every call runs sequentially. Work is always split
//! into the same fixed chunks and partial results are returned in input order,
//! so callers that reduce the returned vector left-to-right get bit-identical
//! results in both modes.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this mode actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over fixed-size chunks of `items`, preserving chunk order.
pub fn map_chunks<T, R, F>(exec: Exec, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = exec;
    items.chunks(chunk).map(f).collect()
}

/// Maps `f` over `0..n`, preserving index order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}
