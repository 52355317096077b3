//! Thread-pool executor for the core's parallel sections.

use rayon::prelude::*;
use trajformer_core::exec::{Executor, Sequential};

/// Runs core work either inline or on a dedicated rayon pool.
pub enum Pool {
    Inline(Sequential),
    Rayon(rayon::ThreadPool),
}

impl Pool {
    /// `threads == 1` runs everything on the calling thread; `0` lets rayon
    /// pick the thread count.
    pub fn new(threads: usize) -> anyhow::Result<Self> {
        if threads == 1 {
            return Ok(Pool::Inline(Sequential));
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        Ok(Pool::Rayon(pool))
    }
}

impl Executor for Pool {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Pool::Inline(s) => s.map(n, f),
            Pool::Rayon(p) => p.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}
