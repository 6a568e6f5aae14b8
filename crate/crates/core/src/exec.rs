//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the helpers dispatch to rayon;
//! without it every call runs on the calling thread. Each helper writes into
//! disjoint output slots, so results are bitwise identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work below this many scalar operations is never split across threads.
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Execution strategy for embarrassingly parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

impl Exec {
    /// `Parallel` when the crate was built with rayon, otherwise `Sequential`.
    pub fn best() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }
}

/// Runs `f(chunk_index, chunk)` over `chunk`-sized pieces of `out`.
///
/// `work_per_chunk` is a rough scalar-op estimate used to skip thread
/// dispatch for tiny kernels.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk: usize, work_per_chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let chunks = out.len() / chunk;
        if chunks > 1 && chunks.saturating_mul(work_per_chunk) >= MIN_PARALLEL_WORK && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = (work_per_chunk, MIN_PARALLEL_WORK);
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
