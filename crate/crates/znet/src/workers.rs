//! Order-preserving parallel map on scoped threads.

use std::thread;

use anyhow::Result;

/// Applies `f` to every item on up to `threads` workers. Results come back
/// in input order, so the output does not depend on the thread count.
pub fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_errors() {
        let items: Vec<u32> = (0..37).collect();
        for t in [1, 2, 5, 64] {
            let out = par_map(t, &items, |&x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        let err = par_map(4, &items, |&x| if x == 20 { anyhow::bail!("bad {x}") } else { Ok(x) });
        assert!(err.unwrap_err().to_string().contains("bad 20"));
        assert!(par_map(3, &[] as &[u32], |&x| Ok(x)).unwrap().is_empty());
    }
}
