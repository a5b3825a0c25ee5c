//! Order-preserving parallel map bounded by `--jobs`.

/// Applies `f` to every item on at most `jobs` scoped threads. Results keep
/// the input order, so output does not depend on the worker count.
pub fn map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(usize, &I) -> O + Sync) -> Vec<O> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || part.iter().enumerate().map(|(i, x)| f(c * chunk + i, x)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_is_independent_of_jobs() {
        let items: Vec<u64> = (0..37).collect();
        let one = super::map(&items, 1, |i, x| (i as u64) * 1000 + x * x);
        for jobs in [2, 3, 8, 100] {
            assert_eq!(super::map(&items, jobs, |i, x| (i as u64) * 1000 + x * x), one);
        }
        assert!(super::map(&Vec::<u8>::new(), 4, |_, x| *x).is_empty());
    }
}
