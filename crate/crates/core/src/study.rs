//! Monte Carlo harness for the convergence rates of the empirical moments,
//! the estimator and the plug-in predictor.
//!
//! Almost-sure convergence is not directly observable, so every claim is
//! checked through per-`n` medians over replicates and the Spearman rank
//! correlation between `n` and those medians. Work units are indexed by
//! `tier · R + replicate` and seeded with [`derive_seed`], so a report depends
//! only on its configuration.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{
    estimate_from_moments, lambda_gap, rate_scale, EmpiricalMoments, EstimatorConfig, RhoEstimate,
};
use crate::grid::{h_norm, inner_product};
use crate::model::{
    cross_covariance, default_burn_in, derive_seed, simulate, stationary_covariance, Arh1Spec,
    DEFAULT_SERIES_TOL,
};
use crate::operator::{align_sign, EigenSystem, LinOperator};
use crate::predict::predict;

/// Eigenvalues below this are skipped as divisors in the remark bound.
pub const REMARK_EIGEN_FLOOR: f64 = 1e-12;

/// Relative slack for the per-row norm inequalities.
const ORDER_SLACK: f64 = 1e-12;
/// Absolute slack for the prediction bound.
const PRED_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "err_cov_hs")]
    CovHs,
    #[serde(rename = "err_cross_hs")]
    CrossHs,
    #[serde(rename = "err_eig_sup")]
    EigSup,
    #[serde(rename = "err_evec_sup")]
    EvecSup,
    #[serde(rename = "err_diag_sup")]
    DiagSup,
    #[serde(rename = "err_rho_tr")]
    RhoTr,
    #[serde(rename = "err_rho_hs")]
    RhoHs,
    #[serde(rename = "err_rho_op")]
    RhoOp,
    #[serde(rename = "err_pred")]
    Pred,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::CovHs,
        Metric::CrossHs,
        Metric::EigSup,
        Metric::EvecSup,
        Metric::DiagSup,
        Metric::RhoTr,
        Metric::RhoHs,
        Metric::RhoOp,
        Metric::Pred,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::CovHs => "err_cov_hs",
            Metric::CrossHs => "err_cross_hs",
            Metric::EigSup => "err_eig_sup",
            Metric::EvecSup => "err_evec_sup",
            Metric::DiagSup => "err_diag_sup",
            Metric::RhoTr => "err_rho_tr",
            Metric::RhoHs => "err_rho_hs",
            Metric::RhoOp => "err_rho_op",
            Metric::Pred => "err_pred",
        }
    }

    pub fn value(&self, m: &RowMetrics) -> f64 {
        match self {
            Metric::CovHs => m.err_cov_hs,
            Metric::CrossHs => m.err_cross_hs,
            Metric::EigSup => m.err_eig_sup,
            Metric::EvecSup => m.err_evec_sup,
            Metric::DiagSup => m.err_diag_sup,
            Metric::RhoTr => m.err_rho_tr,
            Metric::RhoHs => m.err_rho_hs,
            Metric::RhoOp => m.err_rho_op,
            Metric::Pred => m.err_pred,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub spec: Arh1Spec,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub est_cfg: EstimatorConfig,
    pub master_seed: u64,
    /// Metrics whose trend statistics go into the summary.
    pub metrics: Vec<Metric>,
    /// Defaults to [`default_burn_in`] at tolerance `1e-10`.
    pub burn_in: Option<usize>,
    pub series_tol: f64,
    /// Worker threads; `None` uses the rayon default.
    pub jobs: Option<usize>,
}

impl StudyConfig {
    pub fn new(spec: Arh1Spec, sample_sizes: Vec<usize>, replicates: usize, master_seed: u64) -> Self {
        StudyConfig {
            spec,
            sample_sizes,
            replicates,
            est_cfg: EstimatorConfig::default(),
            master_seed,
            metrics: Metric::ALL.to_vec(),
            burn_in: None,
            series_tol: DEFAULT_SERIES_TOL,
            jobs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() {
            return Err(Error::Domain("at least one sample size is required".into()));
        }
        if self.sample_sizes.iter().any(|&n| n < 2) {
            return Err(Error::Domain("every sample size must be at least 2".into()));
        }
        if self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("sample sizes must be strictly increasing".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Domain("replicates must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Domain("jobs must be at least 1".into()));
        }
        self.est_cfg.validate()
    }
}

/// Population quantities the empirical ones are compared against.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub rho: LinOperator,
    pub c_x: LinOperator,
    pub d_x: LinOperator,
    /// `{C_j, φ_j}`.
    pub eigen: EigenSystem,
    /// `D_j = ⟨D_X φ_j, φ_j⟩`.
    pub cross_diagonal: Vec<f64>,
    pub rank: usize,
    pub rho_trace_norm: f64,
    pub remark: RemarkRhs,
}

impl GroundTruth {
    pub fn compute(spec: &Arh1Spec, series_tol: f64) -> Result<Self> {
        let c_x = stationary_covariance(spec, series_tol)?;
        let d_x = cross_covariance(spec, &c_x)?;
        let eigen = c_x.eigh()?;
        let cross_diagonal = eigen
            .functions()
            .iter()
            .map(|phi| inner_product(&d_x.apply(phi)?, phi))
            .collect::<Result<Vec<_>>>()?;
        let rank = eigen.rank();
        let remark = remark_rhs(&d_x, &eigen, rank)?;
        Ok(GroundTruth {
            rho: spec.rho().clone(),
            rho_trace_norm: spec.rho().trace_norm(),
            c_x,
            d_x,
            eigen,
            cross_diagonal,
            rank,
            remark,
        })
    }
}

/// `Σ_{j≠k, j,k ≤ rank} (⟨D_X φ_j, φ_k⟩ / C_j)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemarkRhs {
    pub value: f64,
    /// Terms dropped because `C_j < REMARK_EIGEN_FLOOR`.
    pub skipped: usize,
}

pub fn remark_rhs(d_x: &LinOperator, eigen: &EigenSystem, rank: usize) -> Result<RemarkRhs> {
    let grid = d_x.grid();
    let m = grid.len();
    let rank = rank.min(eigen.len());
    // G = Φᵀ W K W Φ, so G[(k, j)] = ⟨D_X φ_j, φ_k⟩.
    let weighted = DMatrix::from_fn(m, rank, |i, j| grid.weights()[i] * eigen.functions()[j].values()[i]);
    let g = weighted.transpose() * d_x.kernel() * &weighted;
    let mut value = 0.0;
    let mut skipped = 0;
    for j in 0..rank {
        let c_j = eigen.values()[j];
        for k in 0..rank {
            if j == k {
                continue;
            }
            if c_j < REMARK_EIGEN_FLOOR {
                skipped += 1;
                continue;
            }
            let t = g[(k, j)] / c_j;
            value += t * t;
        }
    }
    Ok(RemarkRhs { value, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemarkCheck {
    /// `‖ρ̂ − ρ‖²_S`.
    pub lhs: f64,
    pub rhs: f64,
    pub skipped: usize,
}

pub fn remark_bound_check(estimate: &RhoEstimate, truth: &GroundTruth) -> Result<RemarkCheck> {
    let lhs = estimate.operator.sub(&truth.rho)?.hs_norm().powi(2);
    Ok(RemarkCheck {
        lhs,
        rhs: truth.remark.value,
        skipped: truth.remark.skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowMetrics {
    pub k_n: usize,
    /// `Λ_{k_n}` of the population spectrum; `None` when a gap is not positive.
    pub lambda_k: Option<f64>,
    pub err_cov_hs: f64,
    pub err_cross_hs: f64,
    pub err_eig_sup: f64,
    pub err_evec_sup: f64,
    pub err_diag_sup: f64,
    pub err_rho_tr: f64,
    pub err_rho_hs: f64,
    pub err_rho_op: f64,
    pub err_pred: f64,
    /// `err_rho_op · ‖X_{n−1}‖_H`.
    pub pred_bound: f64,
    pub last_norm: f64,
    /// `‖X_n − ρ(X_{n−1})‖_H = ‖ε_n‖_H`, the irreducible part of the forecast error.
    pub innovation_norm: f64,
    pub remark_lhs: f64,
    /// `max(‖ρ‖₁, ‖ρ̂‖₁) − min(‖ρ‖₁, ‖ρ̂‖₁)`, reported next to the true `err_rho_tr`.
    pub trace_identity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `n^{1/4}/(ln n)^β`.
    pub scale: f64,
    pub outcome: std::result::Result<RowMetrics, String>,
}

impl StudyRow {
    pub fn metrics(&self) -> Option<&RowMetrics> {
        self.outcome.as_ref().ok()
    }

    pub fn failed(&self) -> bool {
        self.outcome.is_err()
    }
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub beta: f64,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub master_seed: u64,
    pub burn_in: usize,
    pub bounded_innovations: bool,
    pub metrics: Vec<Metric>,
    pub remark: RemarkRhs,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }

    pub fn failure_fraction(&self) -> f64 {
        self.failures() as f64 / self.rows.len().max(1) as f64
    }

    pub fn tier_rows(&self, n: usize) -> impl Iterator<Item = &RowMetrics> {
        self.rows.iter().filter(move |r| r.n == n).filter_map(|r| r.metrics())
    }
}

/// A configured study with its ground truth computed once.
pub struct Study {
    cfg: StudyConfig,
    truth: GroundTruth,
    burn_in: usize,
}

impl Study {
    pub fn new(cfg: StudyConfig) -> Result<Self> {
        cfg.validate()?;
        let truth = GroundTruth::compute(&cfg.spec, cfg.series_tol)?;
        let burn_in = cfg
            .burn_in
            .unwrap_or_else(|| default_burn_in(cfg.spec.rho_norm(), DEFAULT_SERIES_TOL));
        Ok(Study { cfg, truth, burn_in })
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    pub fn unit_count(&self) -> usize {
        self.cfg.sample_sizes.len() * self.cfg.replicates
    }

    /// Work unit `index = tier · R + replicate`.
    pub fn run_unit(&self, index: usize) -> StudyRow {
        let tier = index / self.cfg.replicates;
        let replicate = index % self.cfg.replicates;
        let n = self.cfg.sample_sizes[tier];
        let seed = derive_seed(self.cfg.master_seed, index as u64);
        StudyRow {
            n,
            replicate,
            seed,
            scale: rate_scale(n, self.cfg.est_cfg.beta),
            outcome: self.measure(n, seed).map_err(|e| e.to_string()),
        }
    }

    fn measure(&self, n: usize, seed: u64) -> Result<RowMetrics> {
        let truth = &self.truth;
        let spec = self.cfg.spec.with_seed(seed);
        // One extra state gives X_n for the innovation-norm column.
        let path = simulate(&spec, n + 1, self.burn_in)?;
        let sample = path.window(0, n)?;
        let next = &path.observations()[n];

        let moments = EmpiricalMoments::compute(&sample)?;
        let estimate = estimate_from_moments(&moments, &self.cfg.est_cfg)?;
        let k_n = estimate.k_n;

        let err_cov_hs = moments.c_n.sub(&truth.c_x)?.hs_norm();
        let err_cross_hs = moments.d_n.sub(&truth.d_x)?.hs_norm();
        let err_eig_sup = (0..truth.rank)
            .map(|j| (moments.eigen.values()[j] - truth.eigen.values()[j]).abs())
            .fold(0.0, f64::max);

        let upto = k_n.min(truth.rank);
        let mut err_evec_sup = 0.0f64;
        let mut err_diag_sup = 0.0f64;
        for j in 0..upto {
            let empirical = &moments.eigen.functions()[j];
            let aligned = align_sign(empirical, &truth.eigen.functions()[j])?;
            err_evec_sup = err_evec_sup.max(h_norm(&aligned.sub(empirical)?));
            err_diag_sup = err_diag_sup.max((moments.cross.diagonal[j] - truth.cross_diagonal[j]).abs());
        }

        let diff = estimate.operator.sub(&truth.rho)?;
        let singular = diff.singular_values();
        let err_rho_tr: f64 = singular.iter().sum();
        let err_rho_op = singular.iter().copied().fold(0.0, f64::max);
        let err_rho_hs = diff.hs_norm();

        let last = sample.last();
        let target = truth.rho.apply(last)?;
        let err_pred = h_norm(&predict(&estimate, last)?.sub(&target)?);
        let last_norm = h_norm(last);
        let innovation_norm = h_norm(&next.sub(&target)?);

        let est_trace_norm = estimate.operator.trace_norm();
        let trace_identity = (truth.rho_trace_norm - est_trace_norm).abs();

        Ok(RowMetrics {
            k_n,
            lambda_k: lambda_gap(truth.eigen.values(), k_n).ok(),
            err_cov_hs,
            err_cross_hs,
            err_eig_sup,
            err_evec_sup,
            err_diag_sup,
            err_rho_tr,
            err_rho_hs,
            err_rho_op,
            err_pred,
            pred_bound: err_rho_op * last_norm,
            last_norm,
            innovation_norm,
            remark_lhs: err_rho_hs * err_rho_hs,
            trace_identity,
        })
    }

    pub fn run(&self) -> Result<StudyReport> {
        let units: Vec<usize> = (0..self.unit_count()).collect();
        let work = || units.par_iter().map(|&i| self.run_unit(i)).collect::<Vec<_>>();
        let rows = match self.cfg.jobs {
            Some(jobs) => rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?
                .install(work),
            None => work(),
        };
        Ok(StudyReport {
            beta: self.cfg.est_cfg.beta,
            sample_sizes: self.cfg.sample_sizes.clone(),
            replicates: self.cfg.replicates,
            master_seed: self.cfg.master_seed,
            burn_in: self.burn_in,
            bounded_innovations: self.cfg.spec.mode().bounded(),
            metrics: self.cfg.metrics.clone(),
            remark: self.truth.remark,
            rows,
        })
    }
}

pub fn run_study(cfg: StudyConfig) -> Result<StudyReport> {
    Study::new(cfg)?.run()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with midranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Per-tier medians of `value` over successful rows.
pub fn tier_medians(report: &StudyReport, value: impl Fn(&StudyRow, &RowMetrics) -> f64) -> Vec<Option<f64>> {
    report
        .sample_sizes
        .iter()
        .map(|&n| {
            let mut v: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.n == n)
                .filter_map(|r| r.metrics().map(|m| value(r, m)))
                .collect();
            median(&mut v)
        })
        .collect()
}

fn trend_of(report: &StudyReport, value: impl Fn(&StudyRow, &RowMetrics) -> f64) -> Result<f64> {
    if report.sample_sizes.len() < 3 || report.replicates < 5 {
        return Err(Error::InsufficientData(format!(
            "trend needs ≥ 3 sample sizes and ≥ 5 replicates, have {} and {}",
            report.sample_sizes.len(),
            report.replicates
        )));
    }
    let medians = tier_medians(report, value)
        .into_iter()
        .zip(&report.sample_sizes)
        .map(|(m, n)| m.ok_or_else(|| Error::InsufficientData(format!("no successful replicate at n = {n}"))))
        .collect::<Result<Vec<f64>>>()?;
    let ns: Vec<f64> = report.sample_sizes.iter().map(|&n| n as f64).collect();
    Ok(spearman(&ns, &medians))
}

/// Spearman correlation between `n` and the per-`n` median of a metric,
/// optionally multiplied by `n^{1/4}/(ln n)^β`. Negative values mean decay.
pub fn trend_statistic(report: &StudyReport, metric: Metric, scaled: bool) -> Result<f64> {
    trend_of(report, |row, m| {
        let v = metric.value(m);
        if scaled {
            v * row.scale
        } else {
            v
        }
    })
}

/// Trend of the per-`n` median of `max(0, lhs − rhs)` for the remark bound.
pub fn remark_excess_trend(report: &StudyReport) -> Result<f64> {
    let rhs = report.remark.value;
    trend_of(report, |_, m| (m.remark_lhs - rhs).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaProbeRow {
    pub n: usize,
    pub k_n: usize,
    pub lambda_k: f64,
    /// `Λ_{k_n} / (n^{1/4} (ln n)^{β − 1/2})`.
    pub ratio: f64,
}

pub fn lambda_ratio(lambda: f64, n: usize, beta: f64) -> f64 {
    let nf = n as f64;
    lambda / (nf.powf(0.25) * nf.ln().powf(beta - 0.5))
}

/// Per tier, the largest `k_n` used and the normalized `Λ_{k_n}`. Diagnostic
/// only.
pub fn lambda_condition_probe(
    report: &StudyReport,
    eigenvalues: &[f64],
) -> Result<Vec<LambdaProbeRow>> {
    let mut out = Vec::new();
    for &n in &report.sample_sizes {
        let Some(k_n) = report.tier_rows(n).map(|m| m.k_n).max() else {
            continue;
        };
        let lambda_k = lambda_gap(eigenvalues, k_n)?;
        out.push(LambdaProbeRow {
            n,
            k_n,
            lambda_k,
            ratio: lambda_ratio(lambda_k, n, report.beta),
        });
    }
    Ok(out)
}

/// Counts of rows breaking the inequalities that must hold on every row.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HardChecks {
    pub non_finite_or_negative: usize,
    /// `err_rho_op ≤ err_rho_hs ≤ err_rho_tr`.
    pub norm_ordering: usize,
    /// `err_eig_sup ≤ err_cov_hs`.
    pub eig_vs_cov: usize,
    /// `err_pred ≤ err_rho_op · ‖X_{n−1}‖ + 1e−9`.
    pub prediction_bound: usize,
}

impl HardChecks {
    pub fn passed(&self) -> bool {
        *self == HardChecks::default()
    }
}

pub fn hard_checks(report: &StudyReport) -> HardChecks {
    let mut out = HardChecks::default();
    for m in report.rows.iter().filter_map(|r| r.metrics()) {
        if Metric::ALL.iter().any(|k| {
            let v = k.value(m);
            !v.is_finite() || v < 0.0
        }) {
            out.non_finite_or_negative += 1;
        }
        if m.err_rho_op > m.err_rho_hs * (1.0 + ORDER_SLACK) || m.err_rho_hs > m.err_rho_tr * (1.0 + ORDER_SLACK) {
            out.norm_ordering += 1;
        }
        if m.err_eig_sup > m.err_cov_hs * (1.0 + ORDER_SLACK) {
            out.eig_vs_cov += 1;
        }
        if m.err_pred > m.pred_bound + PRED_SLACK {
            out.prediction_bound += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct TierSummary {
    pub n: usize,
    pub successes: usize,
    pub failures: usize,
    pub scale: f64,
    pub median_k_n: Option<f64>,
    /// Per-metric medians, unscaled and (`*_scaled`) scaled.
    pub medians: BTreeMap<String, f64>,
    pub median_remark_excess: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RemarkSummary {
    pub rhs: f64,
    pub skipped_terms: usize,
    /// Trend of `max(0, lhs − rhs)`; `None` with too few tiers or replicates.
    pub excess_trend: Option<f64>,
    pub excess_trend_nonpositive: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub master_seed: u64,
    pub beta: f64,
    pub burn_in: usize,
    /// `bounded` for truncated-Gaussian innovations, `unbounded` otherwise.
    pub innovation_regime: &'static str,
    pub failures: usize,
    pub failure_fraction: f64,
    pub tiers: Vec<TierSummary>,
    /// Spearman statistics keyed by metric name (`*_scaled` for the scaled form).
    pub trends: BTreeMap<String, f64>,
    pub remark: RemarkSummary,
    pub lambda_probe: std::result::Result<Vec<LambdaProbeRow>, String>,
    pub hard_checks: HardChecks,
}

pub fn summarize(report: &StudyReport, truth_eigenvalues: &[f64]) -> StudySummary {
    let rhs = report.remark.value;
    let tiers = report
        .sample_sizes
        .iter()
        .map(|&n| {
            let rows: Vec<&StudyRow> = report.rows.iter().filter(|r| r.n == n).collect();
            let ok: Vec<&RowMetrics> = rows.iter().filter_map(|r| r.metrics()).collect();
            let scale = rate_scale(n, report.beta);
            let mut medians = BTreeMap::new();
            for metric in Metric::ALL {
                let mut v: Vec<f64> = ok.iter().map(|m| metric.value(m)).collect();
                if let Some(med) = median(&mut v) {
                    medians.insert(metric.name().to_string(), med);
                    let mut s: Vec<f64> = ok.iter().map(|m| metric.value(m) * scale).collect();
                    medians.insert(format!("{}_scaled", metric.name()), median(&mut s).unwrap_or(med * scale));
                }
            }
            let mut ks: Vec<f64> = ok.iter().map(|m| m.k_n as f64).collect();
            let mut excess: Vec<f64> = ok.iter().map(|m| (m.remark_lhs - rhs).max(0.0)).collect();
            TierSummary {
                n,
                successes: ok.len(),
                failures: rows.len() - ok.len(),
                scale,
                median_k_n: median(&mut ks),
                medians,
                median_remark_excess: median(&mut excess),
            }
        })
        .collect();

    let mut trends = BTreeMap::new();
    for metric in &report.metrics {
        for scaled in [false, true] {
            if let Ok(t) = trend_statistic(report, *metric, scaled) {
                let key = if scaled {
                    format!("{}_scaled", metric.name())
                } else {
                    metric.name().to_string()
                };
                trends.insert(key, t);
            }
        }
    }
    let excess_trend = remark_excess_trend(report).ok();

    StudySummary {
        sample_sizes: report.sample_sizes.clone(),
        replicates: report.replicates,
        master_seed: report.master_seed,
        beta: report.beta,
        burn_in: report.burn_in,
        innovation_regime: if report.bounded_innovations { "bounded" } else { "unbounded" },
        failures: report.failures(),
        failure_fraction: report.failure_fraction(),
        tiers,
        trends,
        remark: RemarkSummary {
            rhs,
            skipped_terms: report.remark.skipped,
            excess_trend,
            excess_trend_nonpositive: excess_trend.map(|t| t <= 0.0),
        },
        lambda_probe: lambda_condition_probe(report, truth_eigenvalues).map_err(|e| e.to_string()),
        hard_checks: hard_checks(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::{InnovationMode, Preset, PresetParams};
    use std::sync::Arc;

    fn grid() -> Arc<Grid> {
        Grid::uniform(16).unwrap()
    }

    fn small_cfg(preset: Preset, sizes: Vec<usize>, replicates: usize) -> StudyConfig {
        let spec = preset
            .spec(&grid(), &PresetParams::default(), InnovationMode::Gaussian, 0)
            .unwrap();
        StudyConfig::new(spec, sizes, replicates, 99)
    }

    fn fake_report(medians: &[f64]) -> StudyReport {
        let sizes: Vec<usize> = (0..medians.len()).map(|i| 100 * (i + 1)).collect();
        let mut rows = Vec::new();
        for (t, &v) in medians.iter().enumerate() {
            for r in 0..5 {
                let m = RowMetrics {
                    k_n: 1,
                    lambda_k: None,
                    err_cov_hs: v,
                    err_cross_hs: v,
                    err_eig_sup: v,
                    err_evec_sup: v,
                    err_diag_sup: v,
                    err_rho_tr: v,
                    err_rho_hs: v,
                    err_rho_op: v,
                    err_pred: v,
                    pred_bound: v,
                    last_norm: 1.0,
                    innovation_norm: 1.0,
                    remark_lhs: v * v,
                    trace_identity: 0.0,
                };
                rows.push(StudyRow {
                    n: sizes[t],
                    replicate: r,
                    seed: 0,
                    scale: 1.0,
                    outcome: Ok(m),
                });
            }
        }
        StudyReport {
            beta: 0.55,
            sample_sizes: sizes,
            replicates: 5,
            master_seed: 0,
            burn_in: 1,
            bounded_innovations: false,
            metrics: Metric::ALL.to_vec(),
            remark: RemarkRhs { value: 0.0, skipped: 0 },
            rows,
        }
    }

    #[test]
    fn spearman_examples() {
        let strictly_down = fake_report(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(trend_statistic(&strictly_down, Metric::CovHs, false).unwrap(), -1.0);
        let flat = fake_report(&[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(trend_statistic(&flat, Metric::CovHs, false).unwrap(), 0.0);
        let up = fake_report(&[1.0, 2.0, 3.0]);
        assert_eq!(trend_statistic(&up, Metric::RhoTr, false).unwrap(), 1.0);
        assert!(matches!(
            trend_statistic(&fake_report(&[2.0, 1.0]), Metric::CovHs, false),
            Err(Error::InsufficientData(_))
        ));
        // Midranks: [1, 2.5, 2.5, 4] against [1, 2, 3, 4].
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]);
        let expected = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((s - expected).abs() < 1e-15);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(Preset::Diagonal, vec![10, 20], 2);
        assert!(cfg.validate().is_ok());
        cfg.sample_sizes = vec![20, 10];
        assert!(cfg.validate().is_err());
        cfg.sample_sizes = vec![1, 10];
        assert!(cfg.validate().is_err());
        cfg.sample_sizes = vec![10, 20];
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_study_shape_and_determinism() {
        let cfg = small_cfg(Preset::NonDiagonal, vec![50, 100], 2);
        let a = run_study(cfg.clone()).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert_eq!(a.failures(), 0);
        let b = run_study(StudyConfig { jobs: Some(1), ..cfg }).unwrap();
        assert_eq!(a.rows, b.rows);
        assert!(hard_checks(&a).passed());
        for row in &a.rows {
            let m = row.metrics().unwrap();
            assert!(m.err_rho_op <= m.err_rho_hs * (1.0 + 1e-12));
            assert!(m.err_rho_hs <= m.err_rho_tr * (1.0 + 1e-12));
            assert!((row.scale - rate_scale(row.n, 0.55)).abs() == 0.0);
        }
    }

    #[test]
    fn failed_replicates_are_recorded() {
        let g = grid();
        let spec = Arh1Spec::new(
            LinOperator::zeros(g.clone()),
            LinOperator::zeros(g),
            InnovationMode::Gaussian,
            0,
        )
        .unwrap();
        let report = run_study(StudyConfig::new(spec, vec![10, 20], 3, 1)).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(report.failures(), 6);
        assert!(report.rows[0].outcome.as_ref().unwrap_err().contains("estimation impossible"));
    }

    #[test]
    fn remark_rhs_matches_double_loop() {
        for (preset, zero) in [(Preset::Diagonal, true), (Preset::NonDiagonal, false)] {
            let spec = preset
                .spec(&grid(), &PresetParams::default(), InnovationMode::Gaussian, 0)
                .unwrap();
            let truth = GroundTruth::compute(&spec, 1e-12).unwrap();
            let phis = truth.eigen.functions();
            let mut brute = 0.0;
            for j in 0..truth.rank {
                let d_phi = truth.d_x.apply(&phis[j]).unwrap();
                for k in 0..truth.rank {
                    if j != k {
                        let t = inner_product(&d_phi, &phis[k]).unwrap() / truth.eigen.values()[j];
                        brute += t * t;
                    }
                }
            }
            assert!((truth.remark.value - brute).abs() <= 1e-10);
            if zero {
                assert!(truth.remark.value <= 1e-12);
            } else {
                assert!(truth.remark.value > 1e-4);
            }
        }
    }

    #[test]
    fn remark_for_white_noise() {
        let g = grid();
        let (_, cov) = Preset::Diagonal.operators(&g, &PresetParams::default()).unwrap();
        let spec = Arh1Spec::new(LinOperator::zeros(g.clone()), cov, InnovationMode::Gaussian, 0).unwrap();
        let truth = GroundTruth::compute(&spec, 1e-12).unwrap();
        assert_eq!(truth.remark.value, 0.0);
        let sample = simulate(&spec.with_seed(5), 4000, 1).unwrap();
        let est = crate::estimate::estimate_rho(&sample, &EstimatorConfig::default()).unwrap();
        let check = remark_bound_check(&est, &truth).unwrap();
        assert!(check.lhs < 0.01);
    }

    #[test]
    fn lambda_probe_matches_scalar_arithmetic() {
        let eigenvalues: Vec<f64> = (1..=16).map(|j| 1.0 / (j * j) as f64).collect();
        let report = fake_report(&[1.0, 1.0, 1.0]);
        let probe = lambda_condition_probe(&report, &eigenvalues).unwrap();
        for row in &probe {
            // k = 1: Λ_1 = 1/(1 − 1/4).
            let expected = (4.0 / 3.0) / ((row.n as f64).powf(0.25) * (row.n as f64).ln().powf(0.05));
            assert!((row.ratio - expected).abs() < 1e-12);
        }
        assert!(probe.windows(2).all(|w| w[1].ratio < w[0].ratio));

        let tied = vec![1.0, 1.0, 0.5];
        assert!(matches!(
            lambda_condition_probe(&report, &tied),
            Err(Error::InfiniteGap { index: 1 })
        ));
    }

    #[test]
    fn eigenvector_metric_uses_aligned_reference() {
        let cfg = small_cfg(Preset::Diagonal, vec![400], 1);
        let study = Study::new(cfg).unwrap();
        let row = study.run_unit(0);
        let m = row.metrics().unwrap();
        // Aligned distance is at most sqrt(2) for unit vectors.
        assert!(m.err_evec_sup <= 2f64.sqrt() + 1e-12);
        let phi = &study.truth().eigen.functions()[0];
        let flipped = phi.scale(-1.0);
        let aligned = align_sign(&flipped, phi).unwrap();
        assert_eq!(h_norm(&aligned.sub(&flipped).unwrap()), 0.0);
    }
}
