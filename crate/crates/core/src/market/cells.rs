//! Per-cell path statistics for piecewise-constant feedback controls.
//!
//! With controls constant on the cells of a factor grid, `log X`, `log Z` and
//! `log B` are polynomial in the cell values. Each path is therefore reduced
//! once to a few sums per visited cell, and every later evaluation of a
//! policy or a dual control costs O(visited cells) instead of O(steps).

use super::paths::{PathStream, SimConfig};
use super::FactorModel;
use crate::error::{Error, Result};
use crate::reduce::chunked;

/// Nearest-node partition of the factor axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Cells {
    nodes: Vec<f64>,
}

impl Cells {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.iter().any(|v| !v.is_finite()) || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid nodes must be finite and strictly increasing".into()));
        }
        Ok(Cells { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of the nearest node; ties go to the lower node.
    #[inline]
    pub fn locate(&self, y: f64) -> usize {
        let i = self.nodes.partition_point(|&v| v < y);
        if i == 0 {
            0
        } else if i == self.nodes.len() {
            i - 1
        } else if y - self.nodes[i - 1] <= self.nodes[i] - y {
            i - 1
        } else {
            i
        }
    }
}

/// Offsets inside one cell record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatLayout {
    pub n: usize,
}

impl StatLayout {
    /// Time spent in the cell.
    pub const T: usize = 0;
    /// Integral of the shape `s`.
    pub const S1: usize = 1;
    /// Integral of `g^2` with `g = 1 + v s`.
    pub const G2: usize = 2;
    /// Integral of `1 / g^2`.
    pub const IG2: usize = 3;
    /// Integral of `s / g^2`.
    pub const IG2S: usize = 4;
    /// Integral of `|theta|^2`.
    pub const THTH: usize = 5;
    /// Sum of `theta . dW1`.
    pub const THW: usize = 6;
    /// Sum of `dW2`.
    pub const W2: usize = 7;

    /// Sum of `g dW1` (n entries).
    pub fn wg(&self) -> usize {
        8
    }

    /// Sum of `dW1 / g` (n entries).
    pub fn wig(&self) -> usize {
        8 + self.n
    }

    pub fn stride(&self) -> usize {
        8 + 2 * self.n
    }
}

/// Reduced paths for one start value of the factor.
#[derive(Debug, Clone)]
pub struct PathStats {
    pub layout: StatLayout,
    pub count: usize,
    r_int: Vec<f64>,
    y_end: Vec<f64>,
    offsets: Vec<usize>,
    ids: Vec<u32>,
    data: Vec<f64>,
}

/// One reduced path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    /// Index of the first cell record of this path in the whole set.
    pub first: usize,
    /// Integral of `r(Y_t)` over the horizon.
    pub r_int: f64,
    pub y_end: f64,
    pub ids: &'a [u32],
    pub data: &'a [f64],
    pub stride: usize,
}

impl<'a> PathView<'a> {
    pub fn entries(&self) -> impl Iterator<Item = (usize, &'a [f64])> + '_ {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.stride))
            .map(|(&id, rec)| (id as usize, rec))
    }
}

impl FactorModel {
    /// Simulates one path from `y0`, appending its cell records to `ids`/`data`.
    /// Returns `(integral of r, Y at the horizon)`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn reduce_path(
        &self,
        cells: &Cells,
        y0: f64,
        stream: &mut PathStream,
        steps: usize,
        dt: f64,
        ids: &mut Vec<u32>,
        data: &mut Vec<f64>,
        dw1: &mut [f64],
    ) -> (f64, f64) {
        let n = self.n;
        let layout = StatLayout { n };
        let stride = layout.stride();
        let first = ids.len();
        let c = &self.coeffs;
        let mut y = y0;
        let mut r_int = 0.0;
        for _ in 0..steps {
            let s = c.shape.eval(y);
            let g = c.scale(s);
            let r = c.r0 + c.r1 * s;
            let dw2 = stream.step(dw1);
            let cell = cells.locate(y) as u32;
            let k = match ids[first..].iter().position(|&id| id == cell) {
                Some(k) => first + k,
                None => {
                    ids.push(cell);
                    data.extend(std::iter::repeat_n(0.0, stride));
                    ids.len() - 1
                }
            };
            let rec = &mut data[k * stride..(k + 1) * stride];
            let ig2 = dt / (g * g);
            let mut thth = 0.0;
            let mut thw = 0.0;
            for i in 0..n {
                let th = (self.theta0[i] + self.theta1[i] * s) / g;
                thth += th * th;
                thw += th * dw1[i];
                rec[8 + i] += g * dw1[i];
                rec[8 + n + i] += dw1[i] / g;
            }
            rec[StatLayout::T] += dt;
            rec[StatLayout::S1] += s * dt;
            rec[StatLayout::G2] += g * g * dt;
            rec[StatLayout::IG2] += ig2;
            rec[StatLayout::IG2S] += s * ig2;
            rec[StatLayout::THTH] += thth * dt;
            rec[StatLayout::THW] += thw;
            rec[StatLayout::W2] += dw2;
            r_int += r * dt;
            y = self.factor_step(y, dw1, dw2, dt);
        }
        (r_int, y)
    }
}

impl PathStats {
    pub fn build(model: &FactorModel, cells: &Cells, y0: f64, sim: &SimConfig) -> Result<Self> {
        sim.check()?;
        let layout = StatLayout { n: model.n };
        let dt = sim.dt();
        let parts = chunked(sim.count, |range| {
            let mut r_int = Vec::with_capacity(range.len());
            let mut y_end = Vec::with_capacity(range.len());
            let mut counts = Vec::with_capacity(range.len());
            let mut ids = Vec::new();
            let mut data = Vec::new();
            let mut dw1 = vec![0.0; model.n];
            for p in range {
                let mut stream = PathStream::new(sim.seed, p, dt);
                let before = ids.len();
                let (ri, ye) = model.reduce_path(cells, y0, &mut stream, sim.steps, dt, &mut ids, &mut data, &mut dw1);
                r_int.push(ri);
                y_end.push(ye);
                counts.push(ids.len() - before);
            }
            (r_int, y_end, counts, ids, data)
        });
        let mut stats = PathStats {
            layout,
            count: sim.count,
            r_int: Vec::with_capacity(sim.count),
            y_end: Vec::with_capacity(sim.count),
            offsets: Vec::with_capacity(sim.count + 1),
            ids: Vec::new(),
            data: Vec::new(),
        };
        stats.offsets.push(0);
        for (r_int, y_end, counts, ids, data) in parts {
            stats.r_int.extend(r_int);
            stats.y_end.extend(y_end);
            for c in counts {
                let last = *stats.offsets.last().unwrap();
                stats.offsets.push(last + c);
            }
            stats.ids.extend(ids);
            stats.data.extend(data);
        }
        Ok(stats)
    }

    #[inline]
    pub fn path(&self, p: usize) -> PathView<'_> {
        let (a, b) = (self.offsets[p], self.offsets[p + 1]);
        let stride = self.layout.stride();
        PathView {
            first: a,
            r_int: self.r_int[p],
            y_end: self.y_end[p],
            ids: &self.ids[a..b],
            data: &self.data[a * stride..b * stride],
            stride,
        }
    }

    /// Total number of cell records.
    pub fn entries(&self) -> usize {
        self.ids.len()
    }

    /// Cells visited by at least one path.
    pub fn visited(&self, cells: usize) -> Vec<bool> {
        let mut v = vec![false; cells];
        for &id in &self.ids {
            v[id as usize] = true;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_nearest() {
        let c = Cells::new(vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.locate(-5.0), 0);
        assert_eq!(c.locate(-0.6), 0);
        assert_eq!(c.locate(-0.4), 1);
        assert_eq!(c.locate(0.5), 1);
        assert_eq!(c.locate(0.51), 2);
        assert_eq!(c.locate(9.0), 2);
        assert!(Cells::new(vec![0.0, 0.0]).is_err());
    }
}
