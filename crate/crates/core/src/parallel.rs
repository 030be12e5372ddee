//! Worker pools. Results never depend on the worker count: work is split into
//! fixed chunks and reduced in index order.

use crate::error::{Error, Result};

/// Number of workers from an explicit value or `JUMPEST_WORKERS`, else 1.
pub fn resolve_workers(explicit: Option<usize>) -> Result<usize> {
    if let Some(w) = explicit {
        if w == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        return Ok(w);
    }
    match std::env::var("JUMPEST_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&w| w > 0)
            .ok_or_else(|| Error::Config(format!("JUMPEST_WORKERS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

/// Runs `f` inside a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Pairwise reduction of equally sized partial sums, in a fixed order.
pub fn tree_reduce(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("one part left")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_reduce_sums() {
        let parts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(tree_reduce(parts), vec![9.0, 12.0]);
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(resolve_workers(Some(0)).is_err());
        assert_eq!(resolve_workers(Some(3)).unwrap(), 3);
    }
}
