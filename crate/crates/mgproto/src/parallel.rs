//! Deterministic data-parallel map.
//!
//! Worker threads only ever compute independent per-index results; every
//! reduction over those results happens afterwards, sequentially, in index
//! order. That makes the output of [`map_indexed`] — and anything folded from
//! it — bitwise independent of the thread count.

/// Applies `f` to every index in `0..n`, returning results in index order.
///
/// With `threads <= 1` this is a plain sequential map. Otherwise the index
/// range is split into contiguous chunks, one scoped thread per chunk, each
/// writing into its own disjoint slice of the output.
pub fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let workers = threads.min(n);
    let chunk = n.div_ceil(workers);
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let base = w * chunk;
                for (offset, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(base + offset));
                }
            });
        }
    });
    out.into_iter()
        .map(|v| v.expect("all indices computed"))
        .collect()
}
