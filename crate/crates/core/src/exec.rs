//! Deterministic fan-out over rows or columns.
//!
//! Results are always gathered in index order and any reduction over them
//! is done sequentially by the caller, so the thread count never changes a
//! result.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{GmfError, Result};

#[derive(Clone, Copy, Default)]
pub(crate) struct Exec<'a> {
    pool: Option<&'a ThreadPool>,
}

impl<'a> Exec<'a> {
    pub fn sequential() -> Self {
        Self { pool: None }
    }

    pub fn on(pool: Option<&'a ThreadPool>) -> Self {
        Self { pool }
    }

    pub fn map<R, F>(&self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self.pool {
            Some(pool) if len > 1 => pool.install(|| (0..len).into_par_iter().map(&f).collect()),
            _ => (0..len).map(f).collect(),
        }
    }

    pub fn try_map<R, F>(&self, len: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map(len, f).into_iter().collect()
    }
}

/// Worker pool of `threads` workers (0 = all cores).
pub(crate) fn build_pool(threads: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| GmfError::ThreadPool(e.to_string()))
}
