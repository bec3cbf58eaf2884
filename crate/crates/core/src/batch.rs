//! Running many independent jobs, either on one thread or on a rayon pool.
//!
//! Each job owns its state and results come back in input order, so the
//! output is identical for every thread count. Without the `parallel` feature
//! [`Execution::Parallel`] quietly runs sequentially.

use crate::controller::Mode;
use crate::scenario::Scenario;
use crate::sim::{run, run_mode, RunOutput};

/// Environment variable that caps the worker count.
pub const THREADS_ENV: &str = "RWOA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Use a pool of `threads` workers, or the default size when `None`.
    Parallel { threads: Option<usize> },
}

impl Execution {
    /// Parallel with the worker count taken from `RWOA_THREADS`.
    ///
    /// `RWOA_THREADS=1` selects sequential execution. Unparseable or zero
    /// values are ignored with a warning.
    pub fn from_env() -> Self {
        match threads_from_env() {
            Some(1) => Execution::Sequential,
            threads => Execution::Parallel { threads },
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Execution::Parallel { .. })
    }
}

impl Default for Execution {
    fn default() -> Self {
        Execution::from_env()
    }
}

/// Worker cap from the environment, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}: expected a positive integer");
            None
        }
    }
}

/// Applies `f` to every item and returns the results in input order.
pub fn map<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => items.iter().map(f).collect(),
        Execution::Parallel { threads } => parallel_map(items, threads, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: &[T], threads: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    match builder.build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("cannot build a worker pool ({e}); running sequentially");
            items.iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: &[T], _threads: Option<usize>, f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Runs every scenario in its own mode.
pub fn run_all(scenarios: &[Scenario], exec: Execution) -> Vec<RunOutput> {
    map(scenarios, exec, run)
}

/// Runs one scenario in all three modes, ordered as [`Mode::ALL`].
pub fn compare_modes(scenario: &Scenario, exec: Execution) -> Vec<RunOutput> {
    map(&Mode::ALL, exec, |m| run_mode(scenario, *m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..200).collect();
        let seq = map(&items, Execution::Sequential, |x| x * x + 1);
        let par = map(&items, Execution::Parallel { threads: Some(3) }, |x| x * x + 1);
        assert_eq!(seq, par);
        assert_eq!(seq[17], 290);
    }

    #[test]
    fn empty_input() {
        let items: Vec<u8> = Vec::new();
        assert!(map(&items, Execution::Parallel { threads: None }, |x| *x).is_empty());
    }
}
