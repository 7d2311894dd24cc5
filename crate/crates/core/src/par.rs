//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) work items are spread over the rayon
//! pool; without it, or after [`set_parallel(false)`](set_parallel), the same
//! closures run in a plain sequential loop. Results are always collected in
//! item order and every reduction in the crate folds partial results in that
//! order, so numeric output does not depend on the thread count.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables parallel execution at runtime. Has no effect when the
/// crate was built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

/// Whether work is currently dispatched to the thread pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::SeqCst)
}

/// Number of worker threads that [`map`] may use.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Runs `f` with parallelism temporarily switched to `enabled`.
pub fn with_parallel<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = PARALLEL.swap(enabled, Ordering::SeqCst);
    let out = f();
    PARALLEL.store(prev, Ordering::SeqCst);
    out
}

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 && is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Applies `f` to each item of `items` (with its index).
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() > 1 && is_parallel() {
            use rayon::prelude::*;
            items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            return;
        }
    }
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

/// Splits `data` into consecutive chunks of `chunk` elements and applies `f`
/// to each one with its chunk index.
pub fn for_each_chunk<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if data.len() > chunk && is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let par = with_parallel(true, || map(100, |i| i * i));
        let seq = with_parallel(false, || map(100, |i| i * i));
        assert_eq!(par, seq);
        assert_eq!(par[7], 49);
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0.0; 10];
        for_each_chunk(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i as f64));
        assert_eq!(v, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3.]);
    }
}
