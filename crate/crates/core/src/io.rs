//! File formats.
//!
//! * Functions: a grid header line `m,<t_1>,…,<t_m>` followed by one row of
//!   `m` values per function.
//! * Operators: a line `m`, then `m` rows of `m` kernel entries.
//! * Configs and estimates: JSON.
//!
//! Every number is written as `{:.16e}` (17 significant digits), which reads
//! back to the identical `f64`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{EstimatorConfig, RhoEstimate};
use crate::grid::{Grid, GridFunction, DEFAULT_GRID_SIZE};
use crate::model::{Arh1Spec, InnovationMode, Preset, PresetParams, Sample, DEFAULT_SERIES_TOL};
use crate::operator::LinOperator;
use crate::study::{Metric, RowMetrics, StudyConfig, StudyReport};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse number {:?}", field.trim())))
}

fn push_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
}

pub fn grid_header(grid: &Grid) -> String {
    let mut out = grid.len().to_string();
    for p in grid.points() {
        out.push(',');
        out.push_str(&fmt_f64(*p));
    }
    out.push('\n');
    out
}

/// Grid header plus one row per function.
pub fn functions_to_csv(grid: &Grid, functions: &[GridFunction]) -> String {
    let mut out = grid_header(grid);
    for f in functions {
        push_row(&mut out, f.values());
    }
    out
}

/// Parses a grid-headed CSV into its grid and rows.
pub fn functions_from_csv(text: &str) -> Result<(Arc<Grid>, Vec<GridFunction>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("line 1: missing grid header".into()))?;
    let fields: Vec<&str> = header.split(',').collect();
    let m: usize = fields[0]
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line 1: grid size {:?} is not an integer", fields[0])))?;
    if fields.len() != m + 1 {
        return Err(Error::Format(format!(
            "line 1: grid header declares {m} points but lists {}",
            fields.len() - 1
        )));
    }
    let grid = Grid::uniform(m)?;
    for (i, (field, expected)) in fields[1..].iter().zip(grid.points()).enumerate() {
        let p = parse_f64(field, 1)?;
        if (p - expected).abs() > 1e-12 {
            return Err(Error::Format(format!(
                "line 1: point {} is {p}, expected the midpoint {expected}",
                i + 1
            )));
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let values = line
            .split(',')
            .map(|f| parse_f64(f, idx + 1))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != m {
            return Err(Error::GridMismatch {
                left: m,
                right: values.len(),
            });
        }
        rows.push(GridFunction::new(grid.clone(), values)?);
    }
    Ok((grid, rows))
}

pub fn sample_to_csv(sample: &Sample) -> String {
    functions_to_csv(sample.grid(), sample.observations())
}

pub fn sample_from_csv(text: &str) -> Result<Sample> {
    let (_, rows) = functions_from_csv(text)?;
    Sample::new(rows)
}

pub fn operator_to_csv(op: &LinOperator) -> String {
    let m = op.dim();
    let mut out = format!("{m}\n");
    let k = op.kernel();
    for i in 0..m {
        let row: Vec<f64> = (0..m).map(|j| k[(i, j)]).collect();
        push_row(&mut out, &row);
    }
    out
}

pub fn operator_from_csv(text: &str) -> Result<LinOperator> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Format("line 1: missing operator size".into()))?;
    let m: usize = first
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line 1: operator size {first:?} is not an integer")))?;
    let mut kernel = DMatrix::zeros(m, m);
    let mut count = 0;
    for (idx, line) in lines {
        if count == m {
            return Err(Error::Format(format!("line {}: more than {m} kernel rows", idx + 1)));
        }
        let values = line
            .split(',')
            .map(|f| parse_f64(f, idx + 1))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != m {
            return Err(Error::Format(format!(
                "line {}: expected {m} entries, found {}",
                idx + 1,
                values.len()
            )));
        }
        for (j, v) in values.into_iter().enumerate() {
            kernel[(count, j)] = v;
        }
        count += 1;
    }
    if count != m {
        return Err(Error::Format(format!("expected {m} kernel rows, found {count}")));
    }
    LinOperator::new(Grid::uniform(m)?, kernel)
}

/// Reads JSON, reporting parse failures with their line and column.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::Format(format!(
            "{origin}: line {} column {}: {e}",
            e.line(),
            e.column()
        ))
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

/// Model section of a config: a preset or explicit kernel files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub params: PresetParams,
    /// Kernel CSV for `ρ`; relative paths resolve against the config file.
    #[serde(default)]
    pub rho_kernel: Option<PathBuf>,
    #[serde(default)]
    pub innovation_kernel: Option<PathBuf>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_innovation")]
    pub innovation: InnovationMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}

fn default_innovation() -> InnovationMode {
    InnovationMode::Gaussian
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        ModelConfig {
            preset: Some(preset),
            params: PresetParams::default(),
            rho_kernel: None,
            innovation_kernel: None,
            grid_size: DEFAULT_GRID_SIZE,
            innovation: InnovationMode::Gaussian,
            seed: 0,
        }
    }

    pub fn build(&self, base_dir: &Path) -> Result<Arh1Spec> {
        match (&self.preset, &self.rho_kernel, &self.innovation_kernel) {
            (Some(preset), None, None) => {
                let grid = Grid::uniform(self.grid_size)?;
                preset.spec(&grid, &self.params, self.innovation, self.seed)
            }
            (None, Some(rho), Some(cov)) => {
                let rho = operator_from_csv(&read_text(&resolve(base_dir, rho))?)?;
                let cov = operator_from_csv(&read_text(&resolve(base_dir, cov))?)?;
                Arh1Spec::new(rho, cov, self.innovation, self.seed)
            }
            _ => Err(Error::Format(
                "model needs either `preset` or both `rho_kernel` and `innovation_kernel`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: ModelConfig,
    pub n: usize,
    #[serde(default)]
    pub burn_in: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Sample CSV; relative paths resolve against the config file.
    pub sample: PathBuf,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Estimate JSON written by `estimate`.
    pub estimate: PathBuf,
    /// Kernel CSV written by `estimate`.
    pub kernel: PathBuf,
    /// Grid-headed CSV; its last row is used.
    pub last: PathBuf,
    #[serde(default)]
    pub rho_true: Option<PathBuf>,
}

impl PredictConfig {
    pub fn resolved(&self, base: &Path) -> PredictConfig {
        PredictConfig {
            estimate: resolve(base, &self.estimate),
            kernel: resolve(base, &self.kernel),
            last: resolve(base, &self.last),
            rho_true: self.rho_true.as_ref().map(|p| resolve(base, p)),
        }
    }
}

impl EstimateConfig {
    pub fn sample_path(&self, base: &Path) -> PathBuf {
        resolve(base, &self.sample)
    }
}

pub const DEFAULT_FAILURE_BUDGET: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFileConfig {
    pub model: ModelConfig,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub metrics: Option<Vec<Metric>>,
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default = "default_series_tol")]
    pub series_tol: f64,
    /// Largest tolerated fraction of failed replicates.
    #[serde(default = "default_failure_budget")]
    pub failure_budget: f64,
}

fn default_series_tol() -> f64 {
    DEFAULT_SERIES_TOL
}

fn default_failure_budget() -> f64 {
    DEFAULT_FAILURE_BUDGET
}

impl StudyFileConfig {
    pub fn build(&self, base_dir: &Path, jobs: Option<usize>) -> Result<StudyConfig> {
        let spec = self.model.build(base_dir)?;
        Ok(StudyConfig {
            spec,
            sample_sizes: self.sample_sizes.clone(),
            replicates: self.replicates,
            est_cfg: self.estimator.clone(),
            master_seed: self.master_seed,
            metrics: self.metrics.clone().unwrap_or_else(|| Metric::ALL.to_vec()),
            burn_in: self.burn_in,
            series_tol: self.series_tol,
            jobs,
        })
    }
}

/// JSON form of a [`RhoEstimate`]; the kernel travels in a separate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub m: usize,
    pub n: usize,
    pub k_n: usize,
    pub coefficients: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub cross_diagonal: Vec<f64>,
    pub eigen_floor: f64,
    pub trace_norm: f64,
    pub eigenvectors: Vec<Vec<f64>>,
    pub config: EstimatorConfig,
}

impl EstimateFile {
    pub fn new(estimate: &RhoEstimate, n: usize, config: &EstimatorConfig) -> Self {
        EstimateFile {
            m: estimate.operator.dim(),
            n,
            k_n: estimate.k_n,
            coefficients: estimate.coefficients.clone(),
            eigenvalues: estimate.eigenvalues.clone(),
            cross_diagonal: estimate.cross_diagonal.clone(),
            eigen_floor: estimate.eigen_floor,
            trace_norm: estimate.operator.trace_norm(),
            eigenvectors: estimate.eigenvectors.iter().map(|f| f.values().to_vec()).collect(),
            config: config.clone(),
        }
    }

    /// Rebuilds the estimate around an operator read from its kernel CSV.
    pub fn into_estimate(self, operator: LinOperator) -> Result<RhoEstimate> {
        if operator.dim() != self.m {
            return Err(Error::GridMismatch {
                left: self.m,
                right: operator.dim(),
            });
        }
        let k = self.k_n;
        if self.coefficients.len() != k || self.eigenvectors.len() != k {
            return Err(Error::Format(format!(
                "estimate lists {} coefficients and {} eigenvectors for k_n = {k}",
                self.coefficients.len(),
                self.eigenvectors.len()
            )));
        }
        let grid = operator.grid().clone();
        let eigenvectors = self
            .eigenvectors
            .into_iter()
            .map(|v| GridFunction::new(grid.clone(), v))
            .collect::<Result<Vec<_>>>()?;
        Ok(RhoEstimate {
            k_n: k,
            coefficients: self.coefficients,
            eigenvalues: self.eigenvalues,
            cross_diagonal: self.cross_diagonal,
            eigenvectors,
            eigen_floor: self.eigen_floor,
            operator,
        })
    }
}

pub const REPORT_COLUMNS: [&str; 33] = [
    "n",
    "replicate",
    "seed",
    "failed",
    "k_n",
    "lambda_k",
    "scale",
    "err_cov_hs",
    "err_cross_hs",
    "err_eig_sup",
    "err_evec_sup",
    "err_diag_sup",
    "err_rho_tr",
    "err_rho_hs",
    "err_rho_op",
    "err_pred",
    "err_cov_hs_scaled",
    "err_cross_hs_scaled",
    "err_eig_sup_scaled",
    "err_evec_sup_scaled",
    "err_diag_sup_scaled",
    "err_rho_tr_scaled",
    "err_rho_hs_scaled",
    "err_rho_op_scaled",
    "err_pred_scaled",
    "pred_bound",
    "last_norm",
    "innovation_norm",
    "remark_lhs",
    "remark_rhs",
    "remark_excess",
    "trace_identity",
    "failure",
];

/// One row per `(n, replicate)` in the column order of [`REPORT_COLUMNS`].
/// Failed rows leave every numeric cell after `failed` empty.
pub fn report_to_csv(report: &StudyReport) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    let rhs = report.remark.value;
    for row in &report.rows {
        let _ = write!(out, "{},{},{},", row.n, row.replicate, row.seed);
        match &row.outcome {
            Ok(m) => {
                let _ = write!(out, "0,{},", m.k_n);
                out.push_str(&m.lambda_k.map(fmt_f64).unwrap_or_default());
                out.push(',');
                let mut cells = vec![row.scale];
                cells.extend(Metric::ALL.iter().map(|k| k.value(m)));
                cells.extend(Metric::ALL.iter().map(|k| k.value(m) * row.scale));
                cells.extend(tail_cells(m, rhs));
                for c in cells {
                    out.push_str(&fmt_f64(c));
                    out.push(',');
                }
            }
            Err(msg) => {
                out.push_str("1,");
                for _ in 4..REPORT_COLUMNS.len() - 1 {
                    out.push(',');
                }
                out.push_str(&msg.replace([',', '\n', '\r'], ";"));
            }
        }
        out.push('\n');
    }
    out
}

fn tail_cells(m: &RowMetrics, rhs: f64) -> [f64; 7] {
    [
        m.pred_bound,
        m.last_norm,
        m.innovation_norm,
        m.remark_lhs,
        rhs,
        (m.remark_lhs - rhs).max(0.0),
        m.trace_identity,
    ]
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
