//! Kernel operators on the discretized Hilbert space.
//!
//! An operator is stored as an `m × m` kernel `K` acting by
//! `(A f)_i = Σ_j w_j K[i,j] f_j`. Under the isometry `f ↦ W^{1/2} f` onto
//! Euclidean `R^m` the operator becomes the plain matrix `S = W^{1/2} K W^{1/2}`,
//! so singular values, norms and eigenpairs are all computed from `S`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{ensure_same, inner_product, Grid, GridFunction};

/// Largest admissible `|K[i,j] - K[j,i]|`, relative to `max(1, max|K|)`, for
/// an operator to be treated as self-adjoint.
pub const SELF_ADJOINT_TOL: f64 = 1e-10;

/// Eigenvalues at or below this fraction of the leading eigenvalue do not
/// count towards [`EigenSystem::rank`].
pub const RANK_RELATIVE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LinOperator {
    grid: Arc<Grid>,
    kernel: DMatrix<f64>,
}

impl LinOperator {
    pub fn new(grid: Arc<Grid>, kernel: DMatrix<f64>) -> Result<Self> {
        let m = grid.len();
        if kernel.nrows() != m || kernel.ncols() != m {
            return Err(Error::GridMismatch {
                left: m,
                right: kernel.nrows().max(kernel.ncols()),
            });
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator kernel"));
        }
        Ok(LinOperator { grid, kernel })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let m = grid.len();
        LinOperator {
            grid,
            kernel: DMatrix::zeros(m, m),
        }
    }

    /// The identity, with kernel `δ_ij / w_j`.
    pub fn identity(grid: Arc<Grid>) -> Self {
        let kernel = DMatrix::from_diagonal(&DVector::from_iterator(
            grid.len(),
            grid.weights().iter().map(|w| 1.0 / w),
        ));
        LinOperator { grid, kernel }
    }

    /// `Σ_j c_j φ_j ⊗ φ_j` for a list of functions and coefficients.
    pub fn diagonal_form(basis: &[GridFunction], coefficients: &[f64]) -> Result<Self> {
        let first = basis
            .first()
            .ok_or_else(|| Error::Domain("diagonal form needs at least one function".into()))?;
        if basis.len() != coefficients.len() {
            return Err(Error::Domain(format!(
                "{} functions but {} coefficients",
                basis.len(),
                coefficients.len()
            )));
        }
        let grid = first.grid().clone();
        let m = grid.len();
        let mut kernel = DMatrix::zeros(m, m);
        for (phi, &c) in basis.iter().zip(coefficients) {
            ensure_same(&grid, phi.grid())?;
            let v = DVector::from_column_slice(phi.values());
            kernel.ger(c, &v, &v, 1.0);
        }
        LinOperator::new(grid, kernel)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        ensure_same(&self.grid, f.grid())?;
        let wf = DVector::from_iterator(
            f.values().len(),
            f.values()
                .iter()
                .zip(self.grid.weights())
                .map(|(v, w)| w * v),
        );
        let out = &self.kernel * wf;
        Ok(GridFunction::from_parts(self.grid.clone(), out.data.into()))
    }

    /// `A ∘ B`, kernel `K_A W K_B`.
    pub fn compose(&self, other: &LinOperator) -> Result<LinOperator> {
        ensure_same(&self.grid, &other.grid)?;
        let mut left = self.kernel.clone();
        for (j, w) in self.grid.weights().iter().enumerate() {
            left.column_mut(j).scale_mut(*w);
        }
        Ok(LinOperator {
            grid: self.grid.clone(),
            kernel: left * &other.kernel,
        })
    }

    pub fn add(&self, other: &LinOperator) -> Result<LinOperator> {
        ensure_same(&self.grid, &other.grid)?;
        Ok(LinOperator {
            grid: self.grid.clone(),
            kernel: &self.kernel + &other.kernel,
        })
    }

    pub fn sub(&self, other: &LinOperator) -> Result<LinOperator> {
        ensure_same(&self.grid, &other.grid)?;
        Ok(LinOperator {
            grid: self.grid.clone(),
            kernel: &self.kernel - &other.kernel,
        })
    }

    pub fn scale(&self, c: f64) -> LinOperator {
        LinOperator {
            grid: self.grid.clone(),
            kernel: &self.kernel * c,
        }
    }

    /// The adjoint in the weighted metric. With a diagonal metric it is the
    /// kernel transpose.
    pub fn adjoint(&self) -> LinOperator {
        LinOperator {
            grid: self.grid.clone(),
            kernel: self.kernel.transpose(),
        }
    }

    /// `S = W^{1/2} K W^{1/2}`, the operator in Euclidean coordinates.
    pub fn weighted_matrix(&self) -> DMatrix<f64> {
        let sw: Vec<f64> = self.grid.weights().iter().map(|w| w.sqrt()).collect();
        let mut s = self.kernel.clone();
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                s[(i, j)] *= sw[i] * sw[j];
            }
        }
        s
    }

    /// Singular values in the weighted metric, in no particular order.
    pub fn singular_values(&self) -> Vec<f64> {
        self.weighted_matrix()
            .singular_values()
            .iter()
            .copied()
            .collect()
    }

    pub fn operator_norm(&self) -> f64 {
        self.singular_values().into_iter().fold(0.0, f64::max)
    }

    pub fn hs_norm(&self) -> f64 {
        self.weighted_matrix().norm()
    }

    pub fn trace_norm(&self) -> f64 {
        self.singular_values().iter().sum()
    }

    /// `Σ_i w_i K[i,i]`, which equals `Σ_j ⟨A e_j, e_j⟩` over any orthonormal basis.
    pub fn trace(&self) -> f64 {
        self.grid
            .weights()
            .iter()
            .enumerate()
            .fold(0.0, |acc, (i, w)| acc + w * self.kernel[(i, i)])
    }

    pub fn max_asymmetry(&self) -> f64 {
        let m = self.dim();
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in (i + 1)..m {
                worst = worst.max((self.kernel[(i, j)] - self.kernel[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_self_adjoint(&self) -> bool {
        self.max_asymmetry() <= SELF_ADJOINT_TOL * self.kernel.amax().max(1.0)
    }

    /// Eigendecomposition of a self-adjoint operator, eigenvalues descending.
    ///
    /// The kernel is symmetrized as `(K + Kᵀ)/2` after checking it is within
    /// [`SELF_ADJOINT_TOL`] of symmetric; larger asymmetry is rejected.
    pub fn eigh(&self) -> Result<EigenSystem> {
        if self.kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator kernel"));
        }
        let asymmetry = self.max_asymmetry();
        if asymmetry > SELF_ADJOINT_TOL * self.kernel.amax().max(1.0) {
            return Err(Error::NotSelfAdjoint { asymmetry });
        }
        let mut s = self.weighted_matrix();
        s = (&s + s.transpose()) * 0.5;
        let decomposition = SymmetricEigen::try_new(s, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;

        let mut order: Vec<usize> = (0..self.dim()).collect();
        // Stable sort keeps the solver's order on ties.
        order.sort_by(|&a, &b| {
            decomposition.eigenvalues[b].total_cmp(&decomposition.eigenvalues[a])
        });

        let inv_sqrt_w: Vec<f64> = self.grid.weights().iter().map(|w| w.sqrt().recip()).collect();
        let mut values = Vec::with_capacity(order.len());
        let mut functions = Vec::with_capacity(order.len());
        for idx in order {
            values.push(decomposition.eigenvalues[idx]);
            let column = decomposition.eigenvectors.column(idx);
            let phi = column
                .iter()
                .zip(&inv_sqrt_w)
                .map(|(v, s)| v * s)
                .collect();
            functions.push(GridFunction::from_parts(self.grid.clone(), phi));
        }
        Ok(EigenSystem::new(values, functions))
    }
}

/// `x ⊗ y`, the operator `h ↦ ⟨x, h⟩ y`; kernel `K[i,j] = y_i x_j`.
pub fn tensor_product(x: &GridFunction, y: &GridFunction) -> Result<LinOperator> {
    ensure_same(x.grid(), y.grid())?;
    let xv = DVector::from_column_slice(x.values());
    let yv = DVector::from_column_slice(y.values());
    Ok(LinOperator {
        grid: x.grid().clone(),
        kernel: yv * xv.transpose(),
    })
}

/// `sgn(⟨empirical, reference⟩) · reference`, with `sgn(0) = +1`.
pub fn align_sign(empirical: &GridFunction, reference: &GridFunction) -> Result<GridFunction> {
    let ip = inner_product(empirical, reference)?;
    Ok(if ip >= 0.0 {
        reference.clone()
    } else {
        reference.scale(-1.0)
    })
}

/// Eigenvalues sorted in descending order with matching weighted-orthonormal
/// eigenfunctions.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    values: Vec<f64>,
    functions: Vec<GridFunction>,
    rank: usize,
}

impl EigenSystem {
    pub(crate) fn new(values: Vec<f64>, functions: Vec<GridFunction>) -> Self {
        let lead = values.first().copied().unwrap_or(0.0);
        let rank = if lead > 0.0 {
            values.iter().filter(|&&v| v > RANK_RELATIVE_FLOOR * lead).count()
        } else {
            0
        };
        EigenSystem {
            values,
            functions,
            rank,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn functions(&self) -> &[GridFunction] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of eigenvalues above `RANK_RELATIVE_FLOOR · λ_1`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn count_above(&self, floor: f64) -> usize {
        self.values.iter().take_while(|&&v| v > floor).count()
    }

    /// Copy with the listed (0-based) eigenfunctions negated.
    pub fn with_flipped_signs(&self, flip: &[usize]) -> EigenSystem {
        let mut out = self.clone();
        for &j in flip {
            out.functions[j] = out.functions[j].scale(-1.0);
        }
        out
    }

    /// `max_j ‖A φ_j − λ_j φ_j‖_H` against the source operator.
    pub fn max_residual(&self, source: &LinOperator) -> Result<f64> {
        let mut worst = 0.0f64;
        for (lambda, phi) in self.values.iter().zip(&self.functions) {
            let r = source.apply(phi)?.sub(&phi.scale(*lambda))?;
            worst = worst.max(crate::grid::h_norm(&r));
        }
        Ok(worst)
    }
}
