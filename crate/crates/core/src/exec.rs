//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon
//! pool; without it every helper runs on the calling thread. Results are
//! always returned in input order and every reduction done by callers is
//! over those ordered results, so outputs are identical either way.

/// Explicit execution policy. `Parallel` degrades to `Serial` when the
/// crate is built without the `parallel` feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Apply `f` to consecutive chunks of `items`, returning results in chunk order.
pub fn map_chunks<T, R, F>(exec: Execution, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    let _ = exec;
    items
        .chunks(chunk)
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

/// Apply `f` to every item, returning results in input order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(&f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Run `f` over disjoint mutable row blocks of `out` (each `row_len` wide).
pub fn for_each_row_block<F>(exec: Execution, out: &mut [f64], row_len: usize, rows_per_block: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let block = row_len * rows_per_block.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(block)
            .enumerate()
            .for_each(|(i, c)| f(i * rows_per_block, c));
        return;
    }
    let _ = exec;
    for (i, c) in out.chunks_mut(block).enumerate() {
        f(i * rows_per_block, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_keep_order() {
        let items: Vec<u32> = (0..103).collect();
        let serial = map_chunks(Execution::Serial, &items, 10, |_, c| c.iter().sum::<u32>());
        let parallel = map_chunks(Execution::Parallel, &items, 10, |_, c| c.iter().sum::<u32>());
        assert_eq!(serial, parallel);
        assert_eq!(serial.len(), 11);
        assert_eq!(serial.iter().sum::<u32>(), (0..103).sum::<u32>());
    }
}
