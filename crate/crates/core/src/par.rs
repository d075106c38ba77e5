//! Sequential / rayon execution switch.
//!
//! Every data-parallel loop in the crate maps an index or a slice element to an owned result and
//! collects in input order. Reductions happen afterwards on the collected vector, in order, so a
//! parallel run is bit-identical to a sequential one.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

#[allow(clippy::derivable_impls)]
impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }

    /// Runs `f` inside a pool of at most `jobs` threads. `jobs <= 1` forces sequential execution.
    #[cfg_attr(not(feature = "parallel"), allow(unused_variables))]
    pub fn with_jobs<R: Send>(self, jobs: usize, f: impl FnOnce(Execution) -> R + Send) -> R {
        match self {
            Execution::Sequential => f(Execution::Sequential),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                if jobs <= 1 {
                    return f(Execution::Sequential);
                }
                match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                    Ok(pool) => pool.install(|| f(Execution::Parallel)),
                    Err(_) => f(Execution::Sequential),
                }
            }
        }
    }
}
