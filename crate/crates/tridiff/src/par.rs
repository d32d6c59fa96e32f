//! Order-preserving parallel map over scoped threads.

/// Applies `f` to every item using up to `workers` threads. Items are split
/// into contiguous chunks and results come back in input order; the first
/// error in input order wins.
pub fn map<T: Sync, R: Send, E: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R, E> + Sync,
) -> Result<Vec<R>, E> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<_>, E>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_is_kept_for_any_worker_count() {
        let items: Vec<u32> = (0..23).collect();
        for w in 1..6 {
            let out = super::map(&items, w, |&x| Ok::<_, ()>(x * x)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        let err = super::map(&items, 3, |&x| if x >= 10 { Err(x) } else { Ok(x) });
        assert_eq!(err, Err(10));
    }
}
