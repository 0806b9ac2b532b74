//! Toy end-to-end pipeline: model, data, training and evaluation.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod dump;
pub mod eval;
pub mod micro;
pub mod model;
pub mod synthetic;
pub mod train;

use crate::error::{Error, Result};

/// A rayon pool with exactly `threads` workers.
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}
