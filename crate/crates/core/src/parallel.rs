//! Sequential or thread-pool execution of per-video work.
//!
//! Results are always assembled in input order, so any reduction done by
//! the caller sees the same summation order in both modes.

use std::sync::Arc;

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

/// Environment variable consulted when no thread count is given explicitly.
pub const THREADS_ENV: &str = "TRANSFORMHEAD_THREADS";

#[derive(Clone, Default)]
pub struct Parallelism {
    pool: Option<Arc<ThreadPool>>,
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parallelism({})", self.threads())
    }
}

impl Parallelism {
    pub fn sequential() -> Self {
        Self { pool: None }
    }

    /// `threads <= 1` means sequential.
    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?;
        Ok(Self {
            pool: Some(Arc::new(pool)),
        })
    }

    /// Use `explicit` when given, otherwise the environment variable,
    /// otherwise sequential.
    pub fn resolve(explicit: Option<usize>) -> Result<Self> {
        let threads = match explicit {
            Some(n) => n,
            None => match std::env::var(THREADS_ENV) {
                Ok(v) => v.trim().parse().map_err(|_| {
                    Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))
                })?,
                Err(_) => 1,
            },
        };
        Self::with_threads(threads)
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}
