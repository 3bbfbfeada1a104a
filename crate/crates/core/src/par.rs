//! Data-parallel execution over independent work items.
//!
//! Work is split into fixed-size chunks whose boundaries never depend on the
//! thread count, and results come back in input order, so parallel and
//! sequential runs produce bit-identical reductions.

/// How to execute chunked work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Use the rayon pool when the `parallel` feature is enabled; otherwise sequential.
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// Whether this mode will actually run on the thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over `items` in chunks of `chunk` elements, returning results in order.
pub fn map_chunks<I, R, F>(exec: Exec, items: &[I], chunk: usize, f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &[I]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return items
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i * chunk, c))
            .collect();
    }
    let _ = exec;
    items
        .chunks(chunk)
        .enumerate()
        .map(|(i, c)| f(i * chunk, c))
        .collect()
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_keep_order_in_both_modes() {
        let items: Vec<u32> = (0..23).collect();
        let sum = |start: usize, c: &[u32]| (start, c.iter().sum::<u32>());
        let p = map_chunks(Exec::Parallel, &items, 4, sum);
        let s = map_chunks(Exec::Sequential, &items, 4, sum);
        assert_eq!(p, s);
        assert_eq!(p.len(), 6);
        assert_eq!(p[5], (20, 20 + 21 + 22));
    }
}
