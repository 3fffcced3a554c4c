//! Data-parallel helpers. With the `parallel` feature, [`Execution::Parallel`]
//! runs on the rayon pool; without it every call runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether work actually fans out for this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `op` on a pool of at most `threads` workers (ignored when sequential).
    pub fn with_threads<R: Send>(self, threads: Option<usize>, op: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if let (true, Some(n)) = (self.is_parallel(), threads) {
            match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                Ok(pool) => return pool.install(op),
                Err(e) => log::warn!("could not build a {n}-thread pool, using the global one: {e}"),
            }
        }
        let _ = threads;
        op()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&items, |v| v * v);
        let par = Execution::Parallel.map(&items, |v| v * v);
        assert_eq!(seq, par);
        assert_eq!(Execution::Parallel.map_range(10, |i| i), (0..10).collect::<Vec<_>>());
        assert_eq!(Execution::Parallel.with_threads(Some(2), || 7), 7);
    }
}
