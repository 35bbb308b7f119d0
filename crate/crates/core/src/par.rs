//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every entry point runs in order on the calling thread. Results
//! never depend on the choice: parallel paths only split work whose pieces
//! are computed identically and are collected in input order.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
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

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

static KERNELS_PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Process-wide switch for row-parallel dense kernels.
pub fn set_kernel_execution(exec: Execution) {
    KERNELS_PARALLEL.store(exec.is_parallel(), Ordering::Relaxed);
}

pub fn kernel_execution() -> Execution {
    if KERNELS_PARALLEL.load(Ordering::Relaxed) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Below this many multiply-adds a kernel is not worth splitting.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 16;

/// `f(i, row)` over the `n`-wide rows of `out`.
pub(crate) fn for_each_row<F>(out: &mut [f64], n: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if n == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK && out.len() > n && kernel_execution().is_parallel() {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    out.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
}

/// `f(i)` for `i in 0..n`, collected in index order.
pub fn map_range<U, F>(exec: Execution, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// `f(item)` over a slice, collected in order.
pub fn map<T, U, F>(exec: Execution, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_range(exec, items.len(), |i| f(&items[i]))
}
