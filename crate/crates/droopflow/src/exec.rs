//! Batch execution helpers: data-parallel over independent work items when the
//! `parallel` feature is enabled, sequential otherwise. Results are returned
//! in input order either way, so callers stay deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items` sequentially. Always available; the reference path
/// for the benchmarks.
pub fn map_batch_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Map `f` over `items` in parallel, preserving input order.
#[cfg(feature = "parallel")]
pub fn map_batch_par<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items` using the best available strategy.
#[cfg(feature = "parallel")]
pub fn map_batch<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_batch_par(items, f)
}

/// Map `f` over `items` using the best available strategy.
#[cfg(not(feature = "parallel"))]
pub fn map_batch<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    map_batch_seq(items, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let out = map_batch(&items, |&x| x * x);
        assert_eq!(out, items.iter().map(|&x| x * x).collect::<Vec<_>>());
        let seq = map_batch_seq(&items, |&x| x * x);
        assert_eq!(out, seq);
    }
}
