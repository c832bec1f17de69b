use diagnet_core::trainer::Executor;
use rayon::prelude::*;

use crate::error::{CliError, Result};

pub const THREADS_ENV: &str = "DIAGNET_THREADS";

/// Data-parallel executor on a private rayon pool. Results are collected in
/// index order, so reductions match [`diagnet_core::trainer::Sequential`]
/// bit for bit.
pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Failed(format!("cannot start thread pool: {e}")))?;
        Ok(Self { pool })
    }

    /// Sized by `DIAGNET_THREADS`, or every available core when unset.
    pub fn from_env() -> Result<Self> {
        Self::new(threads_from(std::env::var(THREADS_ENV).ok().as_deref())?)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

/// 0 lets rayon pick the machine's core count.
pub fn threads_from(var: Option<&str>) -> Result<usize> {
    match var.map(str::trim) {
        None | Some("") => Ok(0),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

impl Executor for Parallel {
    fn map<T: Send, F: Fn(usize) -> T + Sync>(&self, n: usize, f: F) -> Vec<T> {
        let f = &f;
        self.pool
            .install(|| (0..n).into_par_iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diagnet_core::trainer::Sequential;

    #[test]
    fn thread_env_parsing() {
        assert_eq!(threads_from(None).unwrap(), 0);
        assert_eq!(threads_from(Some("3")).unwrap(), 3);
        assert!(threads_from(Some("0")).is_err());
        assert!(threads_from(Some("many")).is_err());
    }

    #[test]
    fn order_matches_sequential() {
        let p = Parallel::new(3).unwrap();
        let f = |i: usize| (i as f64).sqrt() * 1e-3;
        assert_eq!(p.map(100, f), Sequential.map(100, f));
        assert_eq!(p.threads(), 3);
    }
}
