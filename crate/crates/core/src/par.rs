//! Order-preserving data-parallel map. With the `parallel` feature the work
//! fans out over rayon's pool; without it, or through [`map_seq`], items are
//! processed in order on the calling thread. Both return results in input
//! order, so any reduction done afterwards is bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

pub fn map_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Which execution path [`map_with`] takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

pub fn map_with<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match exec {
        Execution::Parallel => map(items, f),
        Execution::Sequential => map_seq(items, f),
    }
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel")
}
