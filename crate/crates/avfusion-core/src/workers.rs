//! Deterministic fork-join helper.
//!
//! Work items are split into contiguous index chunks, one per worker, and
//! results land in index order, so the output is identical for any worker
//! count. `AVFUSION_THREADS` caps the pool.

pub const THREADS_ENV: &str = "AVFUSION_THREADS";

pub fn worker_count() -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(hw.max(1)).max(1),
        _ => hw.max(1),
    }
}

/// Apply `f` to every index in `0..n`, in parallel, returning results in
/// index order.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let f = &f;
        let mut rest = out.as_mut_slice();
        let mut start = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let base = start;
            start += take;
            scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(base + off));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("worker filled every slot")).collect()
}

/// Like [`parallel_map`] but for fallible work. The first error by index
/// order wins.
pub fn try_parallel_map<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let results = parallel_map(n, f);
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let got = parallel_map(1000, |i| i * 3);
        assert_eq!(got, (0..1000).map(|i| i * 3).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_by_index_wins() {
        let r: Result<Vec<usize>, usize> =
            try_parallel_map(100, |i| if i == 17 || i == 80 { Err(i) } else { Ok(i) });
        assert_eq!(r.unwrap_err(), 17);
    }
}
