// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoped fan-out over read-only work with an order-preserving merge.

use crate::error::Result;

/// Applies `f` to consecutive chunks of `items` on up to `threads` workers and
/// concatenates the results in input order. The output does not depend on the
/// thread count as long as `f` is a pure function of its chunk.
pub fn map_chunks<T, U, F>(items: &[T], chunk: usize, threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> Result<Vec<U>> + Sync,
{
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        let mut out = Vec::with_capacity(items.len());
        for c in chunks {
            out.extend(f(c)?);
        }
        return Ok(out);
    }
    let per = chunks.len().div_ceil(threads);
    let f = &f;
    let results: Vec<Result<Vec<U>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for c in group {
                        out.extend(f(c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_threads() {
        let items: Vec<u32> = (0..103).collect();
        let one = map_chunks(&items, 7, 1, |c| Ok(c.iter().map(|x| x * 3).collect())).unwrap();
        for t in [2, 3, 8, 64] {
            let many = map_chunks(&items, 7, t, |c| Ok(c.iter().map(|x| x * 3).collect())).unwrap();
            assert_eq!(one, many);
        }
        assert_eq!(one.len(), 103);
    }

    #[test]
    fn first_error_is_returned() {
        let items: Vec<u32> = (0..10).collect();
        let r: Result<Vec<u32>> = map_chunks(&items, 2, 3, |c| {
            if c.contains(&5) {
                Err(crate::Error::contract("five"))
            } else {
                Ok(c.to_vec())
            }
        });
        assert!(r.is_err());
    }
}
