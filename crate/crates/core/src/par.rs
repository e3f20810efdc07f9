//! Host-side data parallelism.
//!
//! With the `parallel` feature the hot loops (element linearization, the
//! construction sort, work-group dispatch) run on the rayon pool. Without it,
//! or when [`Backend::Sequential`] is selected at runtime, the same loops run
//! in order on the calling thread. Both paths produce identical outputs
//! wherever the result does not depend on floating-point summation order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Backend {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Backend::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Backend::Sequential
        }
    }
}

impl Backend {
    pub fn is_parallel(self) -> bool {
        !matches!(self, Backend::Sequential)
    }
}

/// `out[i] = f(i)` for `i in 0..len`.
pub fn map_range<T, F>(backend: Backend, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match backend {
        Backend::Sequential => (0..len).map(f).collect(),
        #[cfg(feature = "parallel")]
        Backend::Parallel => {
            use rayon::prelude::*;
            (0..len).into_par_iter().map(f).collect()
        }
    }
}

/// Stable sort by key.
pub fn sort_by_key<T, K, F>(backend: Backend, items: &mut [T], key: F)
where
    T: Send,
    K: Ord,
    F: Fn(&T) -> K + Sync,
{
    match backend {
        Backend::Sequential => items.sort_by_key(key),
        #[cfg(feature = "parallel")]
        Backend::Parallel => {
            use rayon::prelude::*;
            items.par_sort_by_key(key)
        }
    }
}

/// Fallible map over a slice, preserving order.
pub fn try_map<T, U, E, F>(backend: Backend, items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    match backend {
        Backend::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Backend::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
    }
}

/// Fallible for-each over a slice with per-worker state built by `init`.
pub fn try_for_each_init<T, S, E, I, F>(
    backend: Backend,
    items: &[T],
    init: I,
    f: F,
) -> Result<(), E>
where
    T: Sync,
    E: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, &T) -> Result<(), E> + Sync + Send,
{
    match backend {
        Backend::Sequential => {
            let mut state = init();
            items.iter().try_for_each(|item| f(&mut state, item))
        }
        #[cfg(feature = "parallel")]
        Backend::Parallel => {
            use rayon::prelude::*;
            items.par_iter().try_for_each_init(init, f)
        }
    }
}

/// Fallible order-preserving map with per-worker state built by `init`.
pub fn try_map_init<T, S, U, E, I, F>(
    backend: Backend,
    items: &[T],
    init: I,
    f: F,
) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, &T) -> Result<U, E> + Sync + Send,
{
    match backend {
        Backend::Sequential => {
            let mut state = init();
            items.iter().map(|item| f(&mut state, item)).collect()
        }
        #[cfg(feature = "parallel")]
        Backend::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map_init(init, f).collect()
        }
    }
}
