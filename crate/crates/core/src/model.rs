//! ARH(1) processes `X_n = ρ(X_{n−1}) + ε_n` on the discretized space.
//!
//! Innovations are Gaussian (optionally with every Karhunen–Loève score
//! truncated to `[-bound, bound]`), drawn through the eigensystem of the
//! innovation covariance. Ground truth comes from the stationary series
//! `C_X = Σ_k ρ^k C_ε (ρ*)^k` and `D_X = ρ ∘ C_X`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_same, Grid, GridFunction};
use crate::operator::LinOperator;

/// Innovation-covariance eigenvalues down to `-CLIP_TOL · max(1, λ_1)` are
/// clipped to zero; anything more negative is rejected.
pub const CLIP_TOL: f64 = 1e-10;

pub const DEFAULT_TRUNCATION_BOUND: f64 = 4.0;
pub const DEFAULT_SERIES_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InnovationMode {
    Gaussian,
    /// Each standard-normal score is redrawn until `|z| ≤ bound`, which keeps
    /// `‖ε_n‖_H` (and hence `‖X_n‖_H`) bounded.
    TruncatedGaussian {
        #[serde(default = "default_bound")]
        bound: f64,
    },
}

fn default_bound() -> f64 {
    DEFAULT_TRUNCATION_BOUND
}

impl InnovationMode {
    /// Whether innovations are bounded, i.e. whether the bounded-`‖X_0‖`
    /// hypothesis behind the sharper rates holds for this run.
    pub fn bounded(&self) -> bool {
        matches!(self, InnovationMode::TruncatedGaussian { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            InnovationMode::Gaussian => "gaussian",
            InnovationMode::TruncatedGaussian { .. } => "truncated_gaussian",
        }
    }
}

/// Draws `Σ_j sqrt(λ_j) z_j φ_j` for a fixed covariance.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    grid: Arc<Grid>,
    // m × r, column j is sqrt(λ_j) φ_j.
    factor: DMatrix<f64>,
    mode: InnovationMode,
}

impl GaussianSampler {
    pub fn new(cov: &LinOperator, mode: InnovationMode) -> Result<Self> {
        if let InnovationMode::TruncatedGaussian { bound } = mode {
            if !(bound > 0.0) || !bound.is_finite() {
                return Err(Error::Domain(format!("truncation bound must be positive, got {bound}")));
            }
        }
        let eig = cov.eigh()?;
        let lead = eig.values().first().copied().unwrap_or(0.0).abs().max(1.0);
        let mut columns = Vec::new();
        for (j, (&lambda, phi)) in eig.values().iter().zip(eig.functions()).enumerate() {
            if lambda < -CLIP_TOL * lead {
                return Err(Error::Numeric(format!(
                    "covariance eigenvalue {} is negative ({lambda:e})",
                    j + 1
                )));
            }
            if lambda > 0.0 {
                columns.push(DVector::from_column_slice(phi.values()) * lambda.sqrt());
            }
        }
        let m = cov.dim();
        let factor = if columns.is_empty() {
            DMatrix::zeros(m, 0)
        } else {
            DMatrix::from_columns(&columns)
        };
        Ok(GaussianSampler {
            grid: cov.grid().clone(),
            factor,
            mode,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> GridFunction {
        GridFunction::from_parts(self.grid.clone(), self.draw_vector(rng).data.into())
    }

    pub(crate) fn draw_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let r = self.factor.ncols();
        let z = DVector::from_iterator(r, (0..r).map(|_| self.score(rng)));
        &self.factor * z
    }

    fn score<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.mode {
            InnovationMode::Gaussian => rng.sample(StandardNormal),
            InnovationMode::TruncatedGaussian { bound } => loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= bound {
                    break z;
                }
            },
        }
    }
}

/// One draw from the centered Gaussian (or truncated Gaussian) element with
/// covariance `cov`.
pub fn gaussian_draw<R: Rng + ?Sized>(
    cov: &LinOperator,
    mode: InnovationMode,
    rng: &mut R,
) -> Result<GridFunction> {
    Ok(GaussianSampler::new(cov, mode)?.draw(rng))
}

/// A fully specified ARH(1) model together with its RNG seed.
#[derive(Debug, Clone)]
pub struct Arh1Spec {
    rho: LinOperator,
    innovation_cov: LinOperator,
    mode: InnovationMode,
    seed: u64,
    rho_norm: f64,
    sampler: GaussianSampler,
}

impl Arh1Spec {
    pub fn new(
        rho: LinOperator,
        innovation_cov: LinOperator,
        mode: InnovationMode,
        seed: u64,
    ) -> Result<Self> {
        ensure_same(rho.grid(), innovation_cov.grid())?;
        let rho_norm = rho.operator_norm();
        if rho_norm >= 1.0 {
            return Err(Error::Divergent { norm: rho_norm });
        }
        let sampler = GaussianSampler::new(&innovation_cov, mode)?;
        Ok(Arh1Spec {
            rho,
            innovation_cov,
            mode,
            seed,
            rho_norm,
            sampler,
        })
    }

    pub fn rho(&self) -> &LinOperator {
        &self.rho
    }

    pub fn innovation_cov(&self) -> &LinOperator {
        &self.innovation_cov
    }

    pub fn mode(&self) -> InnovationMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.rho.grid()
    }

    pub fn rho_norm(&self) -> f64 {
        self.rho_norm
    }

    pub fn sampler(&self) -> &GaussianSampler {
        &self.sampler
    }

    /// `σ²_ε = E‖ε_n‖² = trace(C_ε)`.
    pub fn innovation_variance(&self) -> f64 {
        self.innovation_cov.trace()
    }

    pub fn with_seed(&self, seed: u64) -> Arh1Spec {
        Arh1Spec {
            seed,
            ..self.clone()
        }
    }
}

/// Built-in models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `ρ` and `C_ε` share the eigenbasis `sqrt(2) sin(jπt)`.
    Diagonal,
    /// `ρ = R ∘ P` with `P` as in [`Preset::Diagonal`] and `R` a rotation
    /// coupling neighbouring basis functions.
    NonDiagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetParams {
    /// `ρ_j = c_rho · j^{-2}`.
    pub c_rho: f64,
    /// `σ_j² = c_sigma · j^{-2}`.
    pub c_sigma: f64,
    /// Number of basis functions; defaults to `m − 1`, the largest count for
    /// which the sampled sines stay orthonormal on the midpoint grid.
    pub components: Option<usize>,
    /// Generator scale of the neighbour rotation (non-diagonal preset).
    pub rotation: f64,
    /// `‖ρ‖_{L(H)}` after normalization (non-diagonal preset).
    pub target_norm: f64,
}

impl Default for PresetParams {
    fn default() -> Self {
        PresetParams {
            c_rho: 0.8,
            c_sigma: 1.0,
            components: None,
            rotation: 0.3,
            target_norm: 0.8,
        }
    }
}

/// `sqrt(2) sin(jπt)` for `j = 1..=count`.
pub fn sine_basis(grid: &Arc<Grid>, count: usize) -> Vec<GridFunction> {
    (1..=count)
        .map(|j| {
            let values = grid
                .points()
                .iter()
                .map(|&t| 2f64.sqrt() * (j as f64 * PI * t).sin())
                .collect();
            GridFunction::from_parts(grid.clone(), values)
        })
        .collect()
}

impl PresetParams {
    pub fn component_count(&self, grid: &Grid) -> Result<usize> {
        let max = grid.len().saturating_sub(1).max(1);
        let count = self.components.unwrap_or(max);
        if count == 0 || count > max {
            return Err(Error::Domain(format!(
                "preset needs 1..={max} components on a {}-point grid, got {count}",
                grid.len()
            )));
        }
        Ok(count)
    }

    pub fn rho_coefficients(&self, count: usize) -> Vec<f64> {
        (1..=count).map(|j| self.c_rho / (j * j) as f64).collect()
    }

    pub fn sigma2_coefficients(&self, count: usize) -> Vec<f64> {
        (1..=count).map(|j| self.c_sigma / (j * j) as f64).collect()
    }
}

impl Preset {
    /// `(ρ, C_ε)` for this preset.
    pub fn operators(&self, grid: &Arc<Grid>, params: &PresetParams) -> Result<(LinOperator, LinOperator)> {
        let count = params.component_count(grid)?;
        let basis = sine_basis(grid, count);
        let diag = params.rho_coefficients(count);
        let cov = LinOperator::diagonal_form(&basis, &params.sigma2_coefficients(count))?;
        let rho = match self {
            Preset::Diagonal => LinOperator::diagonal_form(&basis, &diag)?,
            Preset::NonDiagonal => {
                let q = neighbour_rotation(count, params.rotation);
                // ρ φ_b = Σ_a Q[a,b] ρ_b φ_a, i.e. kernel Φ M Φᵀ with M = Q diag(ρ).
                let mut coef = q;
                for (b, d) in diag.iter().enumerate() {
                    coef.column_mut(b).scale_mut(*d);
                }
                let phi = DMatrix::from_fn(grid.len(), count, |i, j| basis[j].values()[i]);
                let unscaled = LinOperator::new(grid.clone(), &phi * coef * phi.transpose())?;
                let norm = unscaled.operator_norm();
                if norm == 0.0 {
                    return Err(Error::Domain("non-diagonal preset has zero autocorrelation".into()));
                }
                unscaled.scale(params.target_norm / norm)
            }
        };
        Ok((rho, cov))
    }

    pub fn spec(
        &self,
        grid: &Arc<Grid>,
        params: &PresetParams,
        mode: InnovationMode,
        seed: u64,
    ) -> Result<Arh1Spec> {
        let (rho, cov) = self.operators(grid, params)?;
        Arh1Spec::new(rho, cov, mode, seed)
    }
}

/// `exp(θ A)` with `A` the antisymmetric tridiagonal generator
/// `A[j, j+1] = 1, A[j+1, j] = −1`.
fn neighbour_rotation(count: usize, theta: f64) -> DMatrix<f64> {
    let mut gen = DMatrix::zeros(count, count);
    for j in 0..count.saturating_sub(1) {
        gen[(j, j + 1)] = theta;
        gen[(j + 1, j)] = -theta;
    }
    // ‖θA‖ ≤ 2|θ|, so a short Taylor series is exact to rounding for the
    // small angles used here.
    let mut out = DMatrix::identity(count, count);
    let mut term = DMatrix::identity(count, count);
    for k in 1..60 {
        term = &term * &gen / k as f64;
        out += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    out
}

/// `C_X = Σ_{k≥0} ρ^k C_ε (ρ*)^k`, stopping after the first term whose trace
/// is at most `tol`.
pub fn stationary_covariance(spec: &Arh1Spec, tol: f64) -> Result<LinOperator> {
    if spec.rho_norm >= 1.0 {
        return Err(Error::Divergent {
            norm: spec.rho_norm,
        });
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("series tolerance must be positive, got {tol}")));
    }
    let rho = &spec.rho;
    let rho_adj = rho.adjoint();
    let mut term = spec.innovation_cov.clone();
    let mut sum = LinOperator::zeros(spec.grid().clone());
    // Terms shrink at least geometrically with ratio ‖ρ‖²; this cap is only
    // reached for ‖ρ‖ within rounding of 1.
    let max_terms = 1_000_000;
    for _ in 0..max_terms {
        sum = sum.add(&term)?;
        if term.trace() <= tol {
            return Ok(symmetrized(&sum));
        }
        term = symmetrized(&rho.compose(&term)?.compose(&rho_adj)?);
    }
    Err(Error::Numeric("stationary covariance series did not reach tolerance".into()))
}

fn symmetrized(op: &LinOperator) -> LinOperator {
    let k = op.kernel();
    LinOperator::new(op.grid().clone(), (k + k.transpose()) * 0.5)
        .expect("symmetrizing a finite kernel")
}

/// `D_X = ρ ∘ C_X`.
pub fn cross_covariance(spec: &Arh1Spec, c_x: &LinOperator) -> Result<LinOperator> {
    spec.rho.compose(c_x)
}

/// Smallest burn-in `b ≥ 1` with `‖ρ‖^b ≤ tol`. The covariance still missing
/// after `b` steps from zero is `ρ^b C_X (ρ*)^b`, whose trace is at most
/// `‖ρ‖^{2b} trace(C_X)`.
pub fn default_burn_in(rho_norm: f64, tol: f64) -> usize {
    if rho_norm <= 0.0 {
        return 1;
    }
    let b = (tol.ln() / rho_norm.ln()).ceil().max(1.0) as usize;
    debug_assert!(rho_norm.powi(b as i32) <= tol * (1.0 + 1e-12));
    b
}

/// An ordered functional trajectory `X_0, …, X_{n−1}` on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    grid: Arc<Grid>,
    observations: Vec<GridFunction>,
}

impl Sample {
    pub fn new(observations: Vec<GridFunction>) -> Result<Self> {
        if observations.len() < 2 {
            return Err(Error::Domain(format!(
                "n ≥ 2 required, got n = {}",
                observations.len()
            )));
        }
        let grid = observations[0].grid().clone();
        for obs in &observations[1..] {
            ensure_same(&grid, obs.grid())?;
        }
        Ok(Sample { grid, observations })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn observations(&self) -> &[GridFunction] {
        &self.observations
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn last(&self) -> &GridFunction {
        self.observations.last().expect("sample has n ≥ 2")
    }

    /// `n × m` matrix with one observation per row.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.grid.len(), |i, j| self.observations[i].values()[j])
    }

    /// Sub-sample `X_start, …, X_{end−1}`.
    pub fn window(&self, start: usize, end: usize) -> Result<Sample> {
        if start > end || end > self.n() {
            return Err(Error::Domain(format!("window {start}..{end} outside 0..{}", self.n())));
        }
        Sample::new(self.observations[start..end].to_vec())
    }
}

/// Runs the recursion from `X_{−burn_in} = 0`, discards the burn-in states
/// and returns `X_0, …, X_{n−1}`. Deterministic given the spec's seed.
pub fn simulate(spec: &Arh1Spec, n: usize, burn_in: usize) -> Result<Sample> {
    if n < 2 {
        return Err(Error::Domain(format!("n ≥ 2 required, got n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = spec.grid().clone();
    let m = grid.len();
    let mut weighted = spec.rho.kernel().clone();
    for (j, w) in grid.weights().iter().enumerate() {
        weighted.column_mut(j).scale_mut(*w);
    }
    let mut x = DVector::zeros(m);
    let mut observations = Vec::with_capacity(n);
    if burn_in == 0 {
        observations.push(GridFunction::from_parts(grid.clone(), vec![0.0; m]));
    }
    for step in 1..(burn_in + n) {
        x = &weighted * &x + spec.sampler.draw_vector(&mut rng);
        if step >= burn_in {
            observations.push(GridFunction::from_parts(grid.clone(), x.as_slice().to_vec()));
        }
    }
    debug_assert_eq!(observations.len(), n);
    Sample::new(observations)
}

/// Seed for work unit `index` of a study: `splitmix64(master ^ index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = (master ^ index).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
