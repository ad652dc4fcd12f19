//! Sequential or data-parallel execution of independent work items.
//!
//! Every item runs on its own tape, so results are identical whichever
//! policy is used; parallelism only changes wall-clock time. Without the
//! `parallel` feature, [`Exec::Parallel`] runs sequentially.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    /// `jobs == 0` uses rayon's global pool.
    Parallel { jobs: usize },
}

impl Exec {
    /// `--jobs N` semantics: 1 is sequential, 0 means all cores.
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs == 1 {
            Exec::Sequential
        } else {
            Exec::Parallel { jobs }
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Exec::Parallel { .. })
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            Exec::Parallel { jobs } => parallel_map(items, jobs, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<I, O, F>(items: &[I], jobs: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;

    if jobs == 0 {
        return items.par_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<I, O, F>(items: &[I], _jobs: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    items.iter().map(f).collect()
}
