//! Data-parallel map helpers.
//!
//! The `parallel` feature routes batch work through rayon; without it the
//! same entry points run sequentially. Both paths produce identical output
//! (results are collected in index order and reduced sequentially), so the
//! feature only changes wall time, never values.

/// Sequential indexed map, always available.
pub fn map_indexed_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Parallel indexed map preserving input order.
#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Indexed map over a slice: rayon when the `parallel` feature is enabled,
/// sequential otherwise.
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(items, f)
    }
}

/// Map over a range 0..n.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync,
{
    let idx: Vec<usize> = (0..n).collect();
    map_indexed(&idx, |_, &i| f(i))
}
