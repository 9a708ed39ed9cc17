//! Batch execution strategy.
//!
//! Work is split into fixed-size chunks whose results come back in chunk
//! order, so every reduction downstream is a fixed-order sum. Sequential and
//! parallel runs are therefore bit-identical regardless of thread count.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Points per work unit.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

fn chunks(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(size)).map(|i| i * size..((i + 1) * size).min(n)).collect()
}

impl Exec {
    /// Applies `f` to consecutive index ranges of `0..n`; results are in range order.
    pub fn map_chunks<R, F>(self, n: usize, chunk: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(Range<usize>) -> R + Sync + Send,
    {
        let ranges = chunks(n, chunk.max(1));
        match self {
            Exec::Sequential => ranges.into_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => ranges.into_par_iter().map(f).collect(),
        }
    }

    /// Applies `f` to every index of `0..n`; results are in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_ranges_cover_everything() {
        let r = chunks(35, 16);
        assert_eq!(r, vec![0..16, 16..32, 32..35]);
        assert!(chunks(0, 16).is_empty());
    }

    #[test]
    fn results_keep_order() {
        let out = Exec::default().map_chunks(100, 7, |r| r.start);
        assert_eq!(out, (0..100).step_by(7).collect::<Vec<_>>());
        let sq = Exec::default().map(10, |i| i * i);
        assert_eq!(sq[9], 81);
    }
}
