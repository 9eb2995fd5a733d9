//! Sequential or rayon-backed iteration over independent output planes.
//!
//! Kernels split their output into disjoint planes and compute each plane
//! with the same sequential loop, so both strategies produce bit-identical
//! results.

/// How a kernel distributes work over output planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

#[allow(clippy::derivable_impls)]
impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Calls `f(plane_index, plane)` for every `plane_len`-sized chunk of `out`.
    pub fn for_each_plane<T, F>(self, out: &mut [T], plane_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        if plane_len == 0 {
            return;
        }
        match self {
            Execution::Sequential => {
                out.chunks_mut(plane_len).enumerate().for_each(|(i, p)| f(i, p));
            }
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                out.par_chunks_mut(plane_len).enumerate().for_each(|(i, p)| f(i, p));
            }
        }
    }
}
