//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the work is spread over a rayon pool; without
//! it (or with [`Exec::Sequential`]) the same closures run in order on the
//! calling thread. Results are always returned in index order, and callers
//! key their random streams by index, so both paths are bit-identical.

/// Execution strategy for the data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` when the feature is compiled in, else `Sequential`.
    pub fn best() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Maps `f` over `0..len`, collecting results in index order.
pub fn map_indexed<T, F>(exec: Exec, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..len).into_par_iter().map(f).collect()
        }
        _ => (0..len).map(f).collect(),
    }
}

/// Like [`map_indexed`] but short-circuits on the first error (in index order
/// for the sequential path; an arbitrary failing index for the parallel one).
pub fn try_map_indexed<T, E, F>(exec: Exec, len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..len).into_par_iter().map(f).collect()
        }
        _ => (0..len).map(f).collect(),
    }
}

/// Caps the global rayon pool at `AIRFEEL_THREADS` threads, if set.
///
/// Safe to call more than once; only the first call can size the pool.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("AIRFEEL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        assert_eq!(
            map_indexed(Exec::Sequential, 257, f),
            map_indexed(Exec::Parallel, 257, f)
        );
    }

    #[test]
    fn errors_propagate() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(Exec::Sequential, 10, |i| if i == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
