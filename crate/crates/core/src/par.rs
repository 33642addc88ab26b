//! Index-parallel map with a sequential fallback.

/// `(0..n).map(f)`, on the rayon pool when `parallel` is set and the
/// `parallel` feature is enabled. Output order always follows the index.
pub fn map<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
