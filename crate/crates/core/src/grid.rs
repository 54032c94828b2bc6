//! Piecewise-linear functions of the factor on a bounded grid.

use crate::error::{Error, Result};

/// `y -> A(y)` by linear interpolation between nodes and constant extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    y_nodes: Vec<f64>,
    values: Vec<f64>,
}

impl ValueGrid {
    pub fn new(y_nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if y_nodes.is_empty() || y_nodes.len() != values.len() {
            return Err(Error::Config(format!(
                "grid has {} nodes but {} values",
                y_nodes.len(),
                values.len()
            )));
        }
        if y_nodes.windows(2).any(|w| !(w[0] < w[1])) || y_nodes.iter().any(|y| !y.is_finite()) {
            return Err(Error::Config("grid nodes must be finite and strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("grid values must be finite".into()));
        }
        Ok(ValueGrid { y_nodes, values })
    }

    pub fn constant(y_nodes: Vec<f64>, c: f64) -> Result<Self> {
        let values = vec![c; y_nodes.len()];
        ValueGrid::new(y_nodes, values)
    }

    /// `count` equally spaced nodes on `[lo, hi]`.
    pub fn uniform_nodes(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.y_nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|v| *v >= 0.0)
    }

    /// Interpolation stencil: `A(y) = (1 - w) A[i] + w A[i + 1]`.
    #[inline]
    pub fn stencil(&self, y: f64) -> (usize, f64) {
        let n = self.y_nodes.len();
        if n == 1 || y <= self.y_nodes[0] {
            return (0, 0.0);
        }
        if y >= self.y_nodes[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.y_nodes.partition_point(|&v| v <= y) - 1;
        let w = (y - self.y_nodes[i]) / (self.y_nodes[i + 1] - self.y_nodes[i]);
        (i, w)
    }

    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        if self.values.len() == 1 {
            return self.values[0];
        }
        let (i, w) = self.stencil(y);
        if w == 0.0 {
            self.values[i]
        } else if w == 1.0 {
            self.values[i + 1]
        } else {
            (1.0 - w) * self.values[i] + w * self.values[i + 1]
        }
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn inf(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Sup-norm distance on the shared nodes.
    pub fn distance(&self, other: &ValueGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ValueGrid {
        ValueGrid {
            y_nodes: self.y_nodes.clone(),
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }
}
