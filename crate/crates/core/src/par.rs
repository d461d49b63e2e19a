//! Fan-out over independent work items.
//!
//! With the `parallel` feature (default) work runs on the rayon pool;
//! without it, or with [`Execution::Sequential`], it runs in order on the
//! calling thread. Items are identified by index and results come back in
//! index order, so output does not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let seq = map_indexed(257, Execution::Sequential, |i| i * i);
        let par = map_indexed(257, Execution::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[16], 256);
    }
}
