//! Deterministic parallel reductions over paths.
//!
//! Paths are processed in antithetic pairs and in fixed-size chunks. Chunk
//! boundaries never depend on the thread count and partial results are merged
//! in chunk order, so every reduction is bit-identical for any worker count.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::Result;

/// Antithetic pairs per work item.
pub const CHUNK_PAIRS: usize = 128;

/// Streaming mean and variance with an order-fixed merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: f64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n / n;
        self.m2 += other.m2 + d * d * self.n * other.n / n;
        self.n = n;
    }

    /// Unbiased sample variance of the pushed units.
    pub fn variance(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n > 1.0 {
            (self.variance() / self.n).sqrt()
        } else {
            0.0
        }
    }
}

/// Runs `f` on fixed chunks of path indices and returns the chunk results in order.
pub fn chunked<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    let width = 2 * CHUNK_PAIRS;
    let chunks = count.div_ceil(width);
    (0..chunks)
        .into_par_iter()
        .map(|c| f(c * width..((c + 1) * width).min(count)))
        .collect()
}

/// Moments of `K` per-path statistics, averaging each antithetic pair into one unit.
pub fn pair_moments<const K: usize, F>(count: usize, f: F) -> Result<[Moments; K]>
where
    F: Fn(usize) -> Result<[f64; K]> + Sync,
{
    let parts = chunked(count, |range| -> Result<[Moments; K]> {
        let mut acc = [Moments::default(); K];
        let mut p = range.start;
        while p < range.end {
            let a = f(p)?;
            if p + 1 < range.end {
                let b = f(p + 1)?;
                for k in 0..K {
                    acc[k].push(0.5 * (a[k] + b[k]));
                }
            } else {
                for k in 0..K {
                    acc[k].push(a[k]);
                }
            }
            p += 2;
        }
        Ok(acc)
    });
    let mut total = [Moments::default(); K];
    for part in parts {
        let part = part?;
        for k in 0..K {
            total[k].merge(&part[k]);
        }
    }
    Ok(total)
}
