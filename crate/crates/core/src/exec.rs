//! Execution of independent job grids.
//!
//! Evaluation protocols expand into a list of independent jobs (variant x
//! seed x fold). [`map_jobs`] runs them either sequentially or on a rayon
//! pool when the `parallel` feature (default) is enabled; outputs keep the
//! input order, so both modes produce identical results. Without the
//! feature, parallel requests quietly fall back to sequential execution.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Run on a rayon pool with this many threads; 0 means one per core.
    Threads(usize),
}

impl Parallelism {
    /// CLI convention: `jobs == 1` is sequential, anything else is a
    /// thread count (0 = all cores).
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs == 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(jobs)
        }
    }
}

/// Applies `f` to every item, preserving order.
pub fn map_jobs<I, O, F>(items: &[I], parallelism: Parallelism, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match parallelism {
        Parallelism::Sequential => items.iter().map(f).collect(),
        Parallelism::Threads(n) => map_parallel(items, n, f),
    }
}

#[cfg(feature = "parallel")]
fn map_parallel<I, O, F>(items: &[I], threads: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn map_parallel<I, O, F>(items: &[I], _threads: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree_in_order() {
        let items: Vec<u64> = (0..64).collect();
        let f = |x: &u64| x * x + 1;
        let seq = map_jobs(&items, Parallelism::Sequential, f);
        let par = map_jobs(&items, Parallelism::Threads(4), f);
        assert_eq!(seq, par);
        assert_eq!(seq[10], 101);
    }

    #[test]
    fn jobs_one_means_sequential() {
        assert_eq!(Parallelism::from_jobs(1), Parallelism::Sequential);
        assert_eq!(Parallelism::from_jobs(0), Parallelism::Threads(0));
        assert_eq!(Parallelism::from_jobs(3), Parallelism::Threads(3));
    }
}
