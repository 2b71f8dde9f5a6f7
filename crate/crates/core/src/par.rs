//! Execution strategy for per-agent work.
//!
//! With the `parallel` feature, [`Execution::Parallel`] fans independent
//! per-agent computations out over rayon's pool. Without it every strategy
//! runs sequentially. Results are identical either way: each item is computed
//! by the same sequential code and collected in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    Parallel,
    /// Parallel when the feature is enabled and the pool has more than one thread.
    #[default]
    Auto,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        match self {
            Execution::Sequential => false,
            Execution::Parallel => cfg!(feature = "parallel"),
            Execution::Auto => available_threads() > 1,
        }
    }
}

pub fn available_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Maps `f` over `0..len`, collecting results in index order.
pub fn map_indexed<R, F>(exec: Execution, len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Applies `f` to every element of `items` with its index.
pub fn for_each_mut<T, F>(exec: Execution, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
        return;
    }
    let _ = exec;
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}
