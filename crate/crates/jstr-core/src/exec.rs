//! Data-parallel map helpers.
//!
//! With the default `parallel` feature these fan out over rayon; without it
//! they are plain sequential iterators. Either way results come back in
//! input order and each item is computed by exactly one thread, so outputs
//! are bit-identical regardless of thread count or scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub fn par_map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Cap the global worker pool. Called once by the CLI when `JSTR_THREADS`
/// is set; later calls are ignored. No-op in sequential builds.
pub fn limit_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let out = par_map(&items, |&x| x * 2);
        assert_eq!(out, (0..1000).map(|x| x * 2).collect::<Vec<u64>>());
        let out2 = par_map_indexed(1000, |i| i as u64 * 2);
        assert_eq!(out, out2);
    }
}
