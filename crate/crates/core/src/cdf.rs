//! Empirical CDF of a continuous column and its piecewise-linear inverse.
//!
//! The forward map is the usual right-continuous step function, so bin
//! indices computed from it agree exactly with rank counting. The inverse
//! interpolates linearly through `(0, x_(1))` and `(c_k / m, x_(k))`; it is
//! continuous, never leaves `[x_(1), x_(K)]`, and returns every node exactly
//! at that node's own level.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalCdf {
    nodes: Vec<f64>,
    /// Cumulative counts: `counts[k]` observations are `<= nodes[k]`.
    counts: Vec<u64>,
}

impl EmpiricalCdf {
    /// Fits on the cells with `observed[i] == true`.
    pub fn fit(values: &[f64], observed: &[bool]) -> Result<Self> {
        if values.len() != observed.len() {
            return Err(Error::LengthMismatch(values.len(), observed.len()));
        }
        let mut xs: Vec<f64> = values
            .iter()
            .zip(observed)
            .filter_map(|(&v, &r)| r.then_some(v))
            .collect();
        if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value {bad} in CDF fit")));
        }
        xs.sort_by(f64::total_cmp);
        let mut nodes: Vec<f64> = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        for (i, &x) in xs.iter().enumerate() {
            if nodes.last() == Some(&x) {
                *counts.last_mut().unwrap() = i as u64 + 1;
            } else {
                nodes.push(x);
                counts.push(i as u64 + 1);
            }
        }
        if nodes.len() < 2 {
            return Err(Error::DegenerateColumn {
                column: String::new(),
                reason: format!("{} distinct observed values, need 2", nodes.len()),
            });
        }
        Ok(Self { nodes, counts })
    }

    /// Rebuilds from stored nodes and cumulative counts (e.g. a checkpoint).
    pub fn from_parts(nodes: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        let ok = nodes.len() >= 2
            && nodes.len() == counts.len()
            && nodes.iter().all(|v| v.is_finite())
            && nodes.windows(2).all(|w| w[0] < w[1])
            && counts.windows(2).all(|w| w[0] < w[1])
            && counts[0] > 0;
        if !ok {
            return Err(Error::InvalidArgument("malformed empirical CDF parts".into()));
        }
        Ok(Self { nodes, counts })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of observations `m` the CDF was fitted on.
    pub fn total(&self) -> u64 {
        *self.counts.last().unwrap()
    }

    pub fn min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn max(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// `c_k / m` for node `k`.
    pub fn level(&self, k: usize) -> f64 {
        self.counts[k] as f64 / self.total() as f64
    }

    /// Fraction of the fitting sample `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.nodes.partition_point(|&n| n <= x);
        if k == 0 {
            0.0
        } else {
            self.level(k - 1)
        }
    }

    pub fn inverse(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let k = self.counts.partition_point(|&c| (c as f64 / self.total() as f64) < u);
        let k = k.min(self.nodes.len() - 1);
        let hi = self.level(k);
        if u >= hi {
            return self.nodes[k];
        }
        let (lo, x_lo) = if k == 0 {
            (0.0, self.nodes[0])
        } else {
            (self.level(k - 1), self.nodes[k - 1])
        };
        let t = (u - lo) / (hi - lo);
        let x = x_lo + t * (self.nodes[k] - x_lo);
        x.clamp(x_lo, self.nodes[k])
    }

    /// Smallest node level that is `>= u`, if any.
    pub fn level_at_or_above(&self, u: f64) -> Option<f64> {
        let k = self.counts.partition_point(|&c| (c as f64 / self.total() as f64) < u);
        (k < self.nodes.len()).then(|| self.level(k))
    }
}
