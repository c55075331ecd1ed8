//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel loop in the crate goes through these functions. They are
//! written so the result is bitwise-identical regardless of thread count:
//! workers only ever produce values into index-addressed slots or write
//! disjoint chunks; any cross-item reduction is performed by the caller in
//! index order. With the `parallel` feature disabled the same helpers run
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Split `buf` into chunks of `chunk` elements and run `f(chunk_index, chunk)`
/// on each. Chunks are disjoint, so workers never race.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk_mut<F>(buf: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    buf.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk_mut<F>(buf: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for (i, c) in buf.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn chunk_indices_line_up() {
        let mut buf = vec![0.0; 12];
        for_each_chunk_mut(&mut buf, 3, |i, c| {
            for x in c.iter_mut() {
                *x = i as f64;
            }
        });
        assert_eq!(buf[0], 0.0);
        assert_eq!(buf[3], 1.0);
        assert_eq!(buf[11], 3.0);
    }
}
