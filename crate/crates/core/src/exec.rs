//! Execution backends for the per-node maps. Both produce bit-identical
//! results: every node is computed independently from the same inputs.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    Sequential,
    /// rayon data parallelism; sequential when built without `parallel`.
    #[default]
    Parallel,
}

impl Backend {
    /// Whether this backend actually runs in parallel in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Backend::Parallel
    }
}

/// Sets the size of the global worker pool. Has no effect without the
/// `parallel` feature or once the pool is already initialized.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

#[cfg(feature = "parallel")]
const MIN_CHUNK: usize = 256;

/// Calls `f(scratch, i, &mut out[i])` for every index, with one scratch
/// value per worker.
pub fn for_each_indexed<T, S, I, F>(backend: Backend, out: &mut [T], init: I, f: F)
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if backend == Backend::Parallel {
        use rayon::prelude::*;
        out.par_iter_mut()
            .with_min_len(MIN_CHUNK)
            .enumerate()
            .for_each_init(init, |s, (i, o)| f(s, i, o));
        return;
    }
    let _ = backend;
    let mut scratch = init();
    for (i, o) in out.iter_mut().enumerate() {
        f(&mut scratch, i, o);
    }
}

/// Maximum of `f(i)` over `0..n` (`-inf` when empty); NaN-free inputs give
/// the same result on every backend since `max` is associative.
pub fn max_over<F>(backend: Backend, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if backend == Backend::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().with_min_len(MIN_CHUNK).map(f).reduce(|| f64::NEG_INFINITY, f64::max);
    }
    let _ = backend;
    (0..n).map(f).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backends_agree() {
        let mut a = vec![0.0; 10_000];
        let mut b = a.clone();
        let f = |_: &mut (), i: usize, o: &mut f64| *o = (i as f64).sqrt().sin();
        for_each_indexed(Backend::Sequential, &mut a, || (), f);
        for_each_indexed(Backend::Parallel, &mut b, || (), f);
        assert_eq!(a, b);
        let g = |i: usize| ((i * 7919) % 10_007) as f64;
        assert_eq!(max_over(Backend::Sequential, 10_000, g), max_over(Backend::Parallel, 10_000, g));
        assert_eq!(max_over(Backend::Sequential, 0, g), f64::NEG_INFINITY);
    }
}
