//! Data-parallel map helpers. With the `parallel` feature (default) the work
//! is fanned out through rayon; without it the same API runs sequentially.
//! Output order always matches input order, so results are identical either
//! way and downstream reductions stay deterministic.

/// Sequential reference implementation, always available.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    seq_map(items, f)
}

/// Maps over `0..n`, parallel when enabled.
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    par_map((0..n).collect(), f)
}

/// Borrowing variant of [`par_map`] for callers that keep the input.
#[cfg(feature = "parallel")]
pub fn par_map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let items: Vec<u64> = (0..500).collect();
        let f = |x: u64| x.wrapping_mul(0x9e3779b97f4a7c15) ^ (x << 3);
        let a = par_map(items.clone(), f);
        let b = seq_map(items, f);
        assert_eq!(a, b);
    }

    #[test]
    fn range_map_covers_all_indices() {
        let got = par_map_range(100, |i| i * i);
        let want: Vec<usize> = (0..100).map(|i| i * i).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn slice_map_preserves_order_without_consuming() {
        let items: Vec<i64> = (-50..50).collect();
        let got = par_map_slice(&items, |&x| x * 3 - 1);
        let want: Vec<i64> = items.iter().map(|&x| x * 3 - 1).collect();
        assert_eq!(got, want);
        assert_eq!(items.len(), 100);
    }
}
