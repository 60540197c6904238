//! Replicate-level execution: data-parallel map over indices with a
//! sequential fallback behind the `parallel` feature. Work is keyed by
//! index, so results are identical regardless of scheduling or worker
//! count.

/// Maps `f` over `0..count` on a dedicated pool of `workers` threads
/// (sequentially when `workers <= 1` or the `parallel` feature is off).
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(count: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || count <= 1 {
        return map_sequential(count, f);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("failed to build worker pool");
    pool.install(|| {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(&f).collect()
    })
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(count: usize, _workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    map_sequential(count, f)
}

/// Plain sequential map over indices; the baseline the benches compare
/// against.
pub fn map_sequential<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let seq = map_sequential(100, |i| i * i);
        let par = map_indexed(100, 8, |i| i * i);
        assert_eq!(seq, par);
    }
}
