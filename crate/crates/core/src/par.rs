//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it (or with [`Parallelism::Sequential`]) the same
//! closures run in order on the calling thread. Results never depend on the
//! mode: every output element is produced by exactly one closure call.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// `Parallel` when the crate was built with rayon, `Sequential` otherwise.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

/// Calls `f(i, chunk)` for every `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(mode: Parallelism, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
        _ => data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_indexed<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}
