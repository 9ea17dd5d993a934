//! Data-parallel driver with a sequential fallback.
//!
//! Everything routed through here is embarrassingly parallel over an index
//! range, with results collected in index order so outputs are identical
//! whatever the thread count. The `parallel` feature selects the default
//! execution path; both explicit variants stay available for benchmarking.

/// Map `f` over `0..n` sequentially.
pub fn run_indexed_serial<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Map `f` over `0..n` on the rayon pool, preserving index order.
#[cfg(feature = "parallel")]
pub fn run_indexed_parallel<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Default execution path: parallel when the feature is enabled.
#[cfg(feature = "parallel")]
pub fn run_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    run_indexed_parallel(n, f)
}

/// Default execution path (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn run_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    run_indexed_serial(n, f)
}

/// Configure the global thread pool size. Returns the effective count.
/// A size of 0 leaves the default (all cores / sequential build: 1).
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) -> usize {
    if threads > 0 {
        // Ignore the error from configuring twice; the pool keeps its
        // first configuration, which is what reruns want anyway.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) -> usize {
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_deterministic() {
        let serial = run_indexed_serial(1000, |i| i * i);
        let default_path = run_indexed(1000, |i| i * i);
        assert_eq!(serial, default_path);
    }
}
