//! Execution strategy for the data-parallel loops.
//!
//! With the `parallel` feature (on by default) [`Exec::Parallel`] runs on the
//! rayon pool; without it every strategy runs sequentially. Work is split into
//! fixed index ranges and results come back in index order, so both
//! strategies produce bitwise-identical output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Maps `f` over `0..n`, preserving order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps `f` over consecutive chunks `[start, end)` of `0..n`.
    pub fn map_chunks<T, F>(self, n: usize, chunk: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, usize) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        let count = n.div_ceil(chunk);
        self.map(count, |c| f(c * chunk, ((c + 1) * chunk).min(n)))
    }

    /// True when this build can actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(Exec::Sequential.map(1000, f), Exec::Parallel.map(1000, f));
        let g = |s: usize, e: usize| (s..e).map(|i| i as f64 * 0.1).sum::<f64>();
        assert_eq!(
            Exec::Sequential.map_chunks(1001, 64, g),
            Exec::Parallel.map_chunks(1001, 64, g)
        );
        assert_eq!(Exec::Sequential.map_chunks(0, 64, g).len(), 0);
        assert_eq!(Exec::Sequential.map_chunks(130, 64, |s, e| (s, e)), vec![(0, 64), (64, 128), (128, 130)]);
    }
}
