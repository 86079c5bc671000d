//! Runtime switch between data-parallel and sequential execution.
//!
//! All batch-level loops go through [`Exec::map_ranges`] with a fixed chunk
//! size, so results are identical for any worker count: chunk boundaries do
//! not depend on how many threads execute them, and reductions over chunk
//! results happen in index order on the caller side.

use std::ops::Range;

/// Execution mode for batch-level loops.
///
/// `Parallel` uses rayon when the `parallel` feature is enabled and falls
/// back to sequential execution otherwise. `Sequential` is forced by the
/// `--deterministic` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// Mode selected from a config-level deterministic switch.
    pub fn from_deterministic(deterministic: bool) -> Self {
        if deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    /// Split `0..n` into ranges of at most `chunk` items.
    pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
        assert!(chunk > 0, "chunk size must be positive");
        let mut out = Vec::with_capacity(n.div_ceil(chunk));
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            out.push(start..end);
            start = end;
        }
        out
    }

    /// Apply `f` to each range of `0..n` (chunks of size `chunk`) and collect
    /// results in range order.
    pub fn map_ranges<T, F>(self, n: usize, chunk: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(Range<usize>) -> T + Sync + Send,
    {
        let ranges = Self::chunk_ranges(n, chunk);
        self.map_items(ranges, f)
    }

    /// Apply `f` to every item, preserving input order in the output.
    pub fn map_items<I, T, F>(self, items: Vec<I>, f: F) -> Vec<T>
    where
        I: Send,
        T: Send,
        F: Fn(I) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            if self == Exec::Parallel {
                use rayon::prelude::*;
                return items.into_par_iter().map(f).collect();
            }
        }
        items.into_iter().map(f).collect()
    }
}
