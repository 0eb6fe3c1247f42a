//! Discretized `L²([0,1])`.
//!
//! Functions are sampled at the midpoints of `m` equal cells and integrated
//! with the midpoint rule, so every quadrature weight equals `1/m`. All
//! reductions run in ascending index order, which makes results reproducible
//! bit-for-bit.

use std::sync::Arc;

use crate::error::{Error, Result};

pub const DEFAULT_GRID_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    /// Midpoint grid with `m` cells.
    pub fn uniform(m: usize) -> Result<Arc<Grid>> {
        if m == 0 {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        let h = 1.0 / m as f64;
        let points = (0..m).map(|i| (i as f64 + 0.5) * h).collect();
        let weights = vec![h; m];
        Ok(Arc::new(Grid::new(points, weights)?))
    }

    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Grid> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidGrid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidGrid("points must lie in [0, 1]".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidGrid("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidGrid(format!("weights sum to {total}, not 1")));
        }
        Ok(Grid { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Grids are shared by reference; two handles are compatible when they point
/// at the same grid or at equal grids.
pub(crate) fn ensure_same(a: &Arc<Grid>, b: &Arc<Grid>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::GridMismatch {
            left: a.len(),
            right: b.len(),
        })
    }
}

/// An element of the discretized Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch {
                left: grid.len(),
                right: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function"));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let m = grid.len();
        GridFunction {
            grid,
            values: vec![0.0; m],
        }
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Result<Self> {
        let m = grid.len();
        GridFunction::new(grid, vec![c; m])
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        GridFunction::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scale(&self, alpha: f64) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        ensure_same(&self.grid, &other.grid)?;
        Ok(GridFunction {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    // Crate-internal constructor for values already known to be finite.
    pub(crate) fn from_parts(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        GridFunction { grid, values }
    }
}

/// `Σ_i w_i (f_i g_i)`, accumulated left to right. The product `f_i g_i` is
/// formed first so the result is exactly symmetric in its arguments.
pub fn inner_product(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    ensure_same(&f.grid, &g.grid)?;
    Ok(weighted_dot(f.grid.weights(), &f.values, &g.values))
}

pub fn h_norm(f: &GridFunction) -> f64 {
    weighted_dot(f.grid.weights(), &f.values, &f.values).sqrt()
}

pub(crate) fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter()
        .zip(a.iter().zip(b))
        .fold(0.0, |acc, (&w, (&x, &y))| acc + w * (x * y))
}
