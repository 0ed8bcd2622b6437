/// Maps `f` over `items` on up to `threads` scoped threads; results keep the
/// input order, so reductions over them are independent of the thread count.
pub fn map_ordered<I: Sync, O: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(usize, &I) -> O + Sync,
) -> Vec<O> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(k, x)| f(k, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, x)| f(c * chunk + k, x))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
