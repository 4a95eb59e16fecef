//! Matrix-valued samples on uniform grids with local cubic interpolation.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// A uniform grid `start + i * step`, `i = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl UniformGrid {
    pub fn new(start: f64, step: f64, len: usize) -> Result<Self> {
        if !(step > 0.0) || len == 0 {
            return Err(Error::Invalid(format!("bad grid: step {step}, len {len}")));
        }
        Ok(UniformGrid { start, step, len })
    }

    /// Grid covering `[start, end]` with spacing `step`; `end` is included
    /// when it falls on a node up to round-off.
    pub fn spanning(start: f64, end: f64, step: f64) -> Result<Self> {
        let n = ((end - start) / step + 1e-9).floor();
        if !(n >= 0.0) {
            return Err(Error::Invalid(format!("empty grid [{start}, {end}]")));
        }
        Self::new(start, step, n as usize + 1)
    }

    pub fn node(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.node(self.len - 1)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.node(i)).collect()
    }

    /// Fractional index of `x`.
    pub fn position(&self, x: f64) -> f64 {
        (x - self.start) / self.step
    }

    /// Index of the node nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let p = self.position(x).round();
        p.clamp(0.0, (self.len - 1) as f64) as usize
    }

    pub fn contains(&self, x: f64) -> bool {
        let p = self.position(x);
        p >= -1e-9 && p <= (self.len - 1) as f64 + 1e-9
    }
}

/// Lagrange weights for evaluating at fractional position `p` from the
/// integer nodes `first..first + count`.
pub fn lagrange_weights(p: f64, first: isize, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| {
            let xi = (first + i as isize) as f64;
            (0..count)
                .filter(|&j| j != i)
                .map(|j| {
                    let xj = (first + j as isize) as f64;
                    (p - xj) / (xi - xj)
                })
                .product()
        })
        .collect()
}

/// First node of the 4-point stencil around fractional position `p` on a
/// grid of `len` nodes.
pub fn cubic_stencil_start(p: f64, len: usize) -> isize {
    let base = p.floor() as isize - 1;
    base.clamp(0, len as isize - 4)
}

/// Matrix samples on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    pub grid: UniformGrid,
    pub values: Vec<DMatrix<f64>>,
}

impl MatrixSeries {
    pub fn new(grid: UniformGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.len {
            return Err(Error::Invalid(format!(
                "{} samples for a grid of {} nodes",
                values.len(),
                grid.len
            )));
        }
        Ok(MatrixSeries { grid, values })
    }

    /// Cubic Lagrange interpolation on the four nearest nodes.
    pub fn eval(&self, x: f64) -> Result<DMatrix<f64>> {
        if !self.grid.contains(x) {
            return Err(Error::OutOfWindow { r: x });
        }
        let len = self.grid.len;
        if len < 4 {
            let i = self.grid.nearest(x);
            return Ok(self.values[i].clone());
        }
        let p = self.grid.position(x);
        let first = cubic_stencil_start(p, len);
        let w = lagrange_weights(p, first, 4);
        let mut out = DMatrix::zeros(self.values[0].nrows(), self.values[0].ncols());
        for (k, wk) in w.iter().enumerate() {
            out += &self.values[first as usize + k] * *wk;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_interpolation_is_exact_for_cubics() {
        let grid = UniformGrid::new(0.0, 0.1, 30).unwrap();
        let f = |x: f64| x * x * x - 2.0 * x + 0.5;
        let values = grid.nodes().iter().map(|&x| DMatrix::from_element(1, 1, f(x))).collect();
        let s = MatrixSeries::new(grid, values).unwrap();
        for &x in &[0.0, 0.033, 1.234, 2.88, 2.9] {
            assert!((s.eval(x).unwrap()[(0, 0)] - f(x)).abs() < 1e-12);
        }
        assert!(s.eval(3.0).is_err());
    }

    #[test]
    fn spanning_includes_endpoint() {
        let g = UniformGrid::spanning(0.0, 1.0, 0.1).unwrap();
        assert_eq!(g.len, 11);
        assert!((g.end() - 1.0).abs() < 1e-12);
    }
}
