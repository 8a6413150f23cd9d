use odeformer_core::train::Executor;
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{Error, Result};

/// Executor backed by a dedicated rayon pool. Results come back in job
/// order, so reductions over them stay deterministic for any thread count.
pub struct Pool {
    pool: ThreadPool,
}

impl Pool {
    /// `threads == 0` uses every available core.
    pub fn new(threads: usize) -> Result<Self> {
        let pool = ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Pool {
    fn run<R: Send>(&self, jobs: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R> {
        self.pool.install(|| (0..jobs).into_par_iter().map(job).collect())
    }
}
