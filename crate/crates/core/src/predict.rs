//! Plug-in one-step prediction `ρ̂_{k_n}(X_{n−1})`.

use crate::error::{Error, Result};
use crate::estimate::RhoEstimate;
use crate::grid::{h_norm, inner_product, GridFunction};
use crate::operator::LinOperator;

const ROUTE_TOL: f64 = 1e-10;
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Prediction {
    pub x_hat: GridFunction,
    /// `ρ(X_{n−1})` when the true operator is known.
    pub oracle: Option<GridFunction>,
    /// `‖x_hat − oracle‖_H`.
    pub error_h: Option<f64>,
}

/// `Σ_j ρ_{n,j} ⟨last, φ_{n,j}⟩ φ_{n,j}`.
pub fn predict_by_coefficients(estimate: &RhoEstimate, last: &GridFunction) -> Result<GridFunction> {
    let mut out = GridFunction::zeros(last.grid().clone());
    for (c, phi) in estimate.coefficients.iter().zip(&estimate.eigenvectors) {
        let score = inner_product(last, phi)?;
        out = out.add(&phi.scale(c * score))?;
    }
    Ok(out)
}

/// Applies the assembled operator and checks the result against the
/// coefficient route.
pub fn predict(estimate: &RhoEstimate, last: &GridFunction) -> Result<GridFunction> {
    let x_hat = estimate.operator.apply(last)?;
    let check = predict_by_coefficients(estimate, last)?;
    let gap = h_norm(&x_hat.sub(&check)?);
    if gap > ROUTE_TOL * h_norm(&x_hat).max(1.0) {
        return Err(Error::Invariant(format!(
            "operator and coefficient predictions differ by {gap:e}"
        )));
    }
    Ok(x_hat)
}

/// Prediction together with its distance to `ρ(last)` when `rho_true` is given.
pub fn predict_with_oracle(
    estimate: &RhoEstimate,
    last: &GridFunction,
    rho_true: Option<&LinOperator>,
) -> Result<Prediction> {
    let x_hat = predict(estimate, last)?;
    let (oracle, error_h) = match rho_true {
        Some(rho) => {
            let target = rho.apply(last)?;
            let err = h_norm(&x_hat.sub(&target)?);
            (Some(target), Some(err))
        }
        None => (None, None),
    };
    Ok(Prediction {
        x_hat,
        oracle,
        error_h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGap {
    /// `‖ρ̂(last) − ρ(last)‖_H`.
    pub gap: f64,
    /// `‖ρ̂ − ρ‖_{L(H)} · ‖last‖_H`.
    pub bound: f64,
}

/// Distance between the plug-in and the oracle prediction, verified against
/// the operator-norm bound.
pub fn oracle_gap(estimate: &RhoEstimate, rho_true: &LinOperator, last: &GridFunction) -> Result<OracleGap> {
    let x_hat = predict(estimate, last)?;
    let gap = h_norm(&x_hat.sub(&rho_true.apply(last)?)?);
    let bound = estimate.operator.sub(rho_true)?.operator_norm() * h_norm(last);
    if gap > bound + BOUND_SLACK {
        return Err(Error::Invariant(format!(
            "prediction gap {gap:e} exceeds operator-norm bound {bound:e}"
        )));
    }
    Ok(OracleGap { gap, bound })
}
