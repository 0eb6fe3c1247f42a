//! Empirical moments and the diagonal componentwise estimator
//! `ρ̂_{k_n} = Σ_{j≤k_n} (D_{n,j}/C_{n,j}) φ_{n,j} ⊗ φ_{n,j}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_product, GridFunction};
use crate::model::Sample;
use crate::operator::{EigenSystem, LinOperator};

/// Absolute tolerance for the two-route cross checks (projection route versus
/// operator route).
pub const ROUTE_TOL: f64 = 1e-9;

/// Floor below which an empirical eigenvalue may not be used as a divisor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum EigenFloor {
    /// Fraction of the leading empirical eigenvalue `C_{n,1}`.
    Relative(f64),
    Absolute(f64),
}

impl EigenFloor {
    pub fn resolve(&self, leading: f64) -> f64 {
        let floor = match *self {
            EigenFloor::Relative(r) => r * leading.max(0.0),
            EigenFloor::Absolute(a) => a,
        };
        floor.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Log exponent of the rate `n^{1/4}/(ln n)^β`; must exceed 1/2.
    pub beta: f64,
    /// Multiplier in the truncation rule.
    pub c_trunc: f64,
    /// Power of `n` in the truncation rule. `None` means 1/4; values in
    /// (1/4, 1/2) give the faster rule available under bounded innovations.
    pub gamma: Option<f64>,
    pub eigen_floor: EigenFloor,
    pub k_override: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            beta: 0.55,
            c_trunc: 1.0,
            gamma: None,
            eigen_floor: EigenFloor::Relative(1e-8),
            k_override: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.5) || !self.beta.is_finite() {
            return Err(Error::Domain(format!("beta must exceed 1/2, got {}", self.beta)));
        }
        if !(self.c_trunc > 0.0) || !self.c_trunc.is_finite() {
            return Err(Error::Domain(format!("c_trunc must be positive, got {}", self.c_trunc)));
        }
        if let Some(g) = self.gamma {
            if !(0.25..0.5).contains(&g) {
                return Err(Error::Domain(format!("gamma must lie in [1/4, 1/2), got {g}")));
            }
        }
        let floor_ok = match self.eigen_floor {
            EigenFloor::Relative(v) | EigenFloor::Absolute(v) => v > 0.0 && v.is_finite(),
        };
        if !floor_ok {
            return Err(Error::Domain("eigen_floor must be positive".into()));
        }
        if self.k_override == Some(0) {
            return Err(Error::Domain("k_override must be at least 1".into()));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(0.25)
    }
}

/// `n^{1/4} / (ln n)^β`.
pub fn rate_scale(n: usize, beta: f64) -> f64 {
    let n = n as f64;
    n.powf(0.25) / n.ln().powf(beta)
}

/// `C_n = (1/n) Σ_i X_i ⊗ X_i`.
pub fn empirical_covariance(sample: &Sample) -> Result<LinOperator> {
    let x = sample.to_matrix();
    let k = x.tr_mul(&x) / sample.n() as f64;
    LinOperator::new(sample.grid().clone(), (&k + k.transpose()) * 0.5)
}

/// `D_n = (1/(n−1)) Σ_{i≤n−2} X_i ⊗ X_{i+1}`; kernel `K[a,b] = mean X_{i+1}(a) X_i(b)`.
pub fn empirical_cross_covariance(sample: &Sample) -> Result<LinOperator> {
    let x = sample.to_matrix();
    let n = sample.n();
    let head = x.rows(0, n - 1);
    let tail = x.rows(1, n - 1);
    let k = tail.tr_mul(&head) / (n - 1) as f64;
    LinOperator::new(sample.grid().clone(), k)
}

/// `n × J` table of projections `X_{i,j,n} = ⟨X_i, φ_{n,j}⟩`.
pub fn project(sample: &Sample, eigen: &EigenSystem) -> Result<DMatrix<f64>> {
    let grid = sample.grid();
    let mut weighted_basis = DMatrix::zeros(grid.len(), eigen.len());
    for (j, phi) in eigen.functions().iter().enumerate() {
        crate::grid::ensure_same(grid, phi.grid())?;
        for (i, (v, w)) in phi.values().iter().zip(grid.weights()).enumerate() {
            weighted_basis[(i, j)] = w * v;
        }
    }
    Ok(sample.to_matrix() * weighted_basis)
}

/// `D*_{n,j,l}` table and its diagonal `D_{n,j}`.
#[derive(Debug, Clone)]
pub struct CrossProjections {
    /// `full[(j, l)] = (1/(n−1)) Σ_i X_{i,j,n} X_{i+1,l,n}`.
    pub full: DMatrix<f64>,
    pub diagonal: Vec<f64>,
}

fn cross_from_projections(projections: &DMatrix<f64>) -> DMatrix<f64> {
    let n = projections.nrows();
    let head = projections.rows(0, n - 1);
    let tail = projections.rows(1, n - 1);
    head.tr_mul(&tail) / (n - 1) as f64
}

/// `D_{n,j}` through the projections, checked against `⟨D_n φ_{n,j}, φ_{n,j}⟩`.
pub fn diagonal_cross(sample: &Sample, eigen: &EigenSystem) -> Result<CrossProjections> {
    let projections = project(sample, eigen)?;
    let d_n = empirical_cross_covariance(sample)?;
    diagonal_cross_checked(&projections, &d_n, eigen)
}

fn diagonal_cross_checked(
    projections: &DMatrix<f64>,
    d_n: &LinOperator,
    eigen: &EigenSystem,
) -> Result<CrossProjections> {
    if projections.nrows() < 2 {
        return Err(Error::Domain("n ≥ 2 required".into()));
    }
    let full = cross_from_projections(projections);
    let diagonal: Vec<f64> = (0..full.nrows()).map(|j| full[(j, j)]).collect();
    for (j, phi) in eigen.functions().iter().enumerate() {
        let via_operator = inner_product(&d_n.apply(phi)?, phi)?;
        if (via_operator - diagonal[j]).abs() > ROUTE_TOL * diagonal[j].abs().max(1.0) {
            return Err(Error::Invariant(format!(
                "D_{{n,{}}}: projection route {} differs from operator route {via_operator}",
                j + 1,
                diagonal[j]
            )));
        }
    }
    Ok(CrossProjections { full, diagonal })
}

/// Everything the estimator needs from one sample.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub c_n: LinOperator,
    pub d_n: LinOperator,
    pub eigen: EigenSystem,
    pub projections: DMatrix<f64>,
    pub cross: CrossProjections,
}

impl EmpiricalMoments {
    pub fn compute(sample: &Sample) -> Result<Self> {
        let c_n = empirical_covariance(sample)?;
        let eigen = c_n.eigh()?;
        let d_n = empirical_cross_covariance(sample)?;
        let projections = project(sample, &eigen)?;
        let cross = diagonal_cross_checked(&projections, &d_n, &eigen)?;
        Ok(EmpiricalMoments {
            c_n,
            d_n,
            eigen,
            projections,
            cross,
        })
    }

    pub fn n(&self) -> usize {
        self.projections.nrows()
    }

    /// Same moments with the listed (0-based) eigenvectors negated.
    pub fn with_flipped_signs(&self, flip: &[usize]) -> EmpiricalMoments {
        let mut out = self.clone();
        out.eigen = self.eigen.with_flipped_signs(flip);
        for &j in flip {
            out.projections.column_mut(j).neg_mut();
        }
        out.cross.full = cross_from_projections(&out.projections);
        out.cross.diagonal = (0..out.cross.full.nrows()).map(|j| out.cross.full[(j, j)]).collect();
        out
    }

    /// `max_j |C_{n,j} − (1/n) Σ_i X²_{i,j,n}|` over eigenvalues above
    /// `relative_floor · C_{n,1}`.
    pub fn projection_variance_residual(&self, relative_floor: f64) -> f64 {
        let n = self.n() as f64;
        let lead = self.eigen.values().first().copied().unwrap_or(0.0);
        self.eigen
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > relative_floor * lead)
            .map(|(j, &c)| {
                let var = self.projections.column(j).iter().map(|x| x * x).sum::<f64>() / n;
                (c - var).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Chosen truncation order together with the floor it was checked against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    pub k_n: usize,
    pub floor: f64,
}

/// `k_n = min(⌈c n^γ/(ln n)^β⌉, #{k : C_{n,k} > floor}, n − 1)`, at least 1.
/// An override replaces the rate rule but must still clear the floor.
pub fn select_truncation(eigenvalues: &[f64], n: usize, cfg: &EstimatorConfig) -> Result<Truncation> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::Domain(format!("n ≥ 2 required, got n = {n}")));
    }
    let leading = eigenvalues.first().copied().unwrap_or(0.0);
    let floor = cfg.eigen_floor.resolve(leading);
    let available = eigenvalues.iter().take_while(|&&c| c > floor).count();
    if available == 0 {
        return Err(Error::EigenFloor {
            index: 1,
            eigenvalue: leading,
            floor,
        });
    }
    if let Some(k) = cfg.k_override {
        if k > n - 1 || k > eigenvalues.len() {
            return Err(Error::Domain(format!(
                "k_override = {k} exceeds min(n − 1, dimension) = {}",
                (n - 1).min(eigenvalues.len())
            )));
        }
        if k > available {
            return Err(Error::EigenFloor {
                index: available + 1,
                eigenvalue: eigenvalues[available],
                floor,
            });
        }
        return Ok(Truncation { k_n: k, floor });
    }
    let nf = n as f64;
    let rate = (cfg.c_trunc * nf.powf(cfg.gamma()) / nf.ln().powf(cfg.beta)).ceil();
    let rate = if rate.is_finite() && rate >= 1.0 { rate as usize } else { 1 };
    let k_n = rate.min(available).min(n - 1).max(1);
    Ok(Truncation { k_n, floor })
}

#[derive(Debug, Clone)]
pub struct RhoEstimate {
    pub k_n: usize,
    /// `ρ_{n,j}`, `j = 1..=k_n`.
    pub coefficients: Vec<f64>,
    /// `C_{n,j}` used as divisors.
    pub eigenvalues: Vec<f64>,
    /// `D_{n,j}`.
    pub cross_diagonal: Vec<f64>,
    pub eigenvectors: Vec<GridFunction>,
    pub eigen_floor: f64,
    pub operator: LinOperator,
}

/// `Σ_j c_j φ_j ⊗ φ_j`.
pub fn assemble(coefficients: &[f64], eigenvectors: &[GridFunction]) -> Result<LinOperator> {
    LinOperator::diagonal_form(eigenvectors, coefficients)
}

pub fn estimate_rho(sample: &Sample, cfg: &EstimatorConfig) -> Result<RhoEstimate> {
    let moments = EmpiricalMoments::compute(sample)?;
    estimate_from_moments(&moments, cfg)
}

/// Coefficients use the ratio-of-sums form
/// `ρ_{n,j} = n/(n−1) · Σ_{i≤n−2} X_{i,j}X_{i+1,j} / Σ_{i≤n−1} X²_{i,j}`
/// and are cross-checked against `D_{n,j} / C_{n,j}`.
pub fn estimate_from_moments(moments: &EmpiricalMoments, cfg: &EstimatorConfig) -> Result<RhoEstimate> {
    let n = moments.n();
    let values = moments.eigen.values();
    let Truncation { k_n, floor } = select_truncation(values, n, cfg)?;
    let p = &moments.projections;
    let nf = n as f64;
    let leading = values[0];

    let mut coefficients = Vec::with_capacity(k_n);
    for j in 0..k_n {
        let c_j = values[j];
        if !(c_j > floor) {
            return Err(Error::Invariant(format!(
                "divisor C_{{n,{}}} = {c_j:e} is not above the floor {floor:e}",
                j + 1
            )));
        }
        let column = p.column(j);
        let lagged: f64 = (0..n - 1).map(|i| column[i] * column[i + 1]).sum();
        let squares: f64 = column.iter().map(|x| x * x).sum();
        let rho_j = nf / (nf - 1.0) * lagged / squares;

        let via_moments = moments.cross.diagonal[j] / c_j;
        // The two routes differ by the eigen-solver residual divided by C_{n,j}.
        let tol = ROUTE_TOL * rho_j.abs().max(1.0) * (leading / c_j).max(1.0);
        if (rho_j - via_moments).abs() > tol {
            return Err(Error::Invariant(format!(
                "ρ_{{n,{}}}: ratio form {rho_j} differs from D/C form {via_moments}",
                j + 1
            )));
        }
        coefficients.push(rho_j);
    }

    let eigenvectors = moments.eigen.functions()[..k_n].to_vec();
    let operator = assemble(&coefficients, &eigenvectors)?;
    Ok(RhoEstimate {
        k_n,
        coefficients,
        eigenvalues: values[..k_n].to_vec(),
        cross_diagonal: moments.cross.diagonal[..k_n].to_vec(),
        eigenvectors,
        eigen_floor: floor,
        operator,
    })
}

/// `Λ_k = max_{j≤k} 1/(C_j − C_{j+1})`.
pub fn lambda_gap(eigenvalues: &[f64], k: usize) -> Result<f64> {
    if k == 0 || eigenvalues.len() < k + 1 {
        return Err(Error::Domain(format!(
            "Λ_{k} needs eigenvalues through index {}, have {}",
            k + 1,
            eigenvalues.len()
        )));
    }
    let mut worst = 0.0f64;
    for j in 0..k {
        let gap = eigenvalues[j] - eigenvalues[j + 1];
        if !(gap > 0.0) {
            return Err(Error::InfiniteGap { index: j + 1 });
        }
        worst = worst.max(1.0 / gap);
    }
    Ok(worst)
}
