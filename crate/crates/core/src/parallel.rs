//! Data-parallel kernels with a sequential twin.
//!
//! Every kernel writes each output slot from exactly one closure call, so the
//! parallel and sequential paths produce bitwise identical results. Reductions
//! across work items are never split across threads.

/// Sequential implementations, always available.
pub mod seq {
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }

    pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]),
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Rayon implementations.
#[cfg(feature = "parallel")]
pub mod par {
    use rayon::prelude::*;

    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Evaluate `f(i)` for `i in 0..n`, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    // Small batches are not worth the fork/join overhead.
    if n < 8 {
        seq::map_indexed(n, f)
    } else {
        par::map_indexed(n, f)
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    seq::map_indexed(n, f)
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if data.len() < 4096 {
        seq::for_each_chunk_mut(data, chunk, f)
    } else {
        par::for_each_chunk_mut(data, chunk, f)
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    seq::for_each_chunk_mut(data, chunk, f)
}
