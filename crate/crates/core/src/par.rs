//! Data-parallel execution with a sequential fallback.
//!
//! Every helper here produces bitwise-identical results under both
//! execution modes: work is split into independent items whose results
//! are written to fixed slots, and any cross-item reduction happens
//! afterwards in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the data-parallel loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

/// Below this many floating point operations the default dispatch stays
/// on the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 15;

/// Picks the default strategy for a workload of `work` scalar operations.
#[inline]
pub fn auto(work: usize) -> Exec {
    if work < PAR_THRESHOLD {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

/// Calls `f(i, row)` for every `cols`-wide row of `data`.
pub fn for_each_row_mut<F>(exec: Exec, data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    match exec {
        Exec::Sequential => data.chunks_mut(cols).enumerate().for_each(|(i, r)| f(i, r)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, r)| f(i, r)),
    }
}

/// Evaluates `f` over `0..n` and returns the results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Sets the global worker count. Only the first call has any effect.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Runs `f` with at most `jobs` concurrent workers.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        if jobs > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(f);
            }
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}
