//! Data-parallel helpers. With the `parallel` feature these run on the rayon
//! pool; without it they fall back to plain iterators. Results are always
//! returned in input order and reductions use a fixed chunking, so outputs
//! are bit-identical between the two builds and across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per reduction chunk. Fixed so the summation tree never depends on
/// the number of worker threads.
pub const REDUCE_CHUNK: usize = 4;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Sums per-item gradient contributions into a buffer of length `len`.
///
/// `f(i, buf)` must add item `i`'s contribution into `buf` and return its
/// scalar loss. Items are grouped into chunks of [`REDUCE_CHUNK`]; each chunk
/// accumulates sequentially and chunk buffers are added in chunk order.
pub fn accumulate<F>(n: usize, len: usize, f: F) -> (f64, Vec<f64>)
where
    F: Fn(usize, &mut [f64]) -> f64 + Sync + Send,
{
    let ([loss], grad) = try_accumulate(n, len, |i, buf| Ok::<_, ()>([f(i, buf)])).unwrap();
    (loss, grad)
}

/// [`accumulate`] with `K` scalar statistics per item and fallible items.
/// The first error in item order is returned.
pub fn try_accumulate<const K: usize, E, F>(n: usize, len: usize, f: F) -> Result<([f64; K], Vec<f64>), E>
where
    E: Send,
    F: Fn(usize, &mut [f64]) -> Result<[f64; K], E> + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_range(chunks, |c| -> Result<([f64; K], Vec<f64>), E> {
        let mut buf = vec![0.0; len];
        let mut stats = [0.0; K];
        for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n) {
            let s = f(i, &mut buf)?;
            for (a, b) in stats.iter_mut().zip(s) {
                *a += b;
            }
        }
        Ok((stats, buf))
    });
    let mut total = vec![0.0; len];
    let mut stats = [0.0; K];
    for p in partials {
        let (s, buf) = p?;
        for (a, b) in stats.iter_mut().zip(s) {
            *a += b;
        }
        for (t, b) in total.iter_mut().zip(&buf) {
            *t += b;
        }
    }
    Ok((stats, total))
}
