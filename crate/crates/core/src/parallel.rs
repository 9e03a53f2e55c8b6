//! Index-parallel map with an ordered, deterministic merge.
//!
//! With the `parallel` feature the work is spread over the current rayon
//! pool; without it the same closure runs in a plain loop. Either way the
//! output vector is ordered by index, so reductions over it are bit-identical
//! across thread counts.

#[cfg(feature = "parallel")]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Same as [`map_indices`] but always sequential.
pub fn map_indices_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_output() {
        let v = map_indices(100, |i| i * i);
        assert_eq!(v, map_indices_seq(100, |i| i * i));
    }
}
