//! `arh1` command line.
//!
//! Exit codes: 0 success, 2 config or domain error, 3 no admissible
//! truncation (empirical eigenvalue floor), 4 study failure (failure budget
//! exceeded or a per-row check broken), 1 anything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::Error;
use crate::estimate::{estimate_rho, EstimatorConfig};
use crate::grid::GridFunction;
use crate::io::{self, EstimateFile, PredictConfig, SimulateConfig, StudyFileConfig};
use crate::model::{default_burn_in, simulate, DEFAULT_SERIES_TOL};
use crate::predict::predict_with_oracle;
use crate::study::{summarize, Study};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EIGEN_FLOOR: i32 = 3;
pub const EXIT_STUDY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "arh1", version, about = "ARH(1) simulation, estimation and consistency studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory from a model config.
    Simulate(RunManifest),
    /// Estimate the autocorrelation operator from a sample.
    Estimate(RunManifest),
    /// Plug-in prediction from a stored estimate.
    Predict(RunManifest),
    /// Replicated convergence study.
    Study(RunManifest),
}

#[derive(Debug, Clone, Args)]
pub struct RunManifest {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    #[arg(long = "seed")]
    pub seed_override: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
    /// Replicate parallelism for `study`.
    #[arg(long, env = "ARH1_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::EigenFloor { .. } => EXIT_EIGEN_FLOOR,
            Error::Domain(_)
            | Error::GridMismatch { .. }
            | Error::InvalidGrid(_)
            | Error::Format(_)
            | Error::Divergent { .. }
            | Error::NotSelfAdjoint { .. } => EXIT_CONFIG,
            _ => EXIT_OTHER,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Simulate(m) => cmd_simulate(m),
        Command::Estimate(m) => cmd_estimate(m),
        Command::Predict(m) => cmd_predict(m),
        Command::Study(m) => cmd_study(m),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<(T, String, PathBuf)> {
    let text = io::read_text(path)?;
    let cfg = io::parse_json(&text, &path.display().to_string())?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, text, base))
}

/// Collects outputs and writes them only after every check has passed.
struct Outputs<'a> {
    manifest: &'a RunManifest,
    files: Vec<(&'static str, String)>,
}

impl<'a> Outputs<'a> {
    fn new(manifest: &'a RunManifest) -> Self {
        Outputs {
            manifest,
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &'static str, contents: String) {
        self.files.push((name, contents));
    }

    fn write(self) -> CliResult<()> {
        let dir = &self.manifest.output_dir;
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        if !self.manifest.force {
            for (name, _) in &self.files {
                let path = dir.join(name);
                if path.exists() {
                    return Err(CliError::config(format!(
                        "{} exists; pass --force to overwrite",
                        path.display()
                    )));
                }
            }
        }
        for (name, contents) in self.files {
            std::fs::write(dir.join(name), contents).map_err(Error::from)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    crate_version: &'static str,
    grid_size: usize,
}

fn provenance(command: &str, config_text: &str, seed: u64, grid_size: usize) -> String {
    io::to_json(&Provenance {
        command,
        config_sha256: io::sha256_hex(config_text.as_bytes()),
        seed,
        crate_version: env!("CARGO_PKG_VERSION"),
        grid_size,
    })
}

pub fn cmd_simulate(manifest: &RunManifest) -> CliResult<()> {
    let (mut cfg, text, base): (SimulateConfig, _, _) = load_config(&manifest.config)?;
    if let Some(seed) = manifest.seed_override {
        cfg.model.seed = seed;
    }
    if cfg.n < 2 {
        return Err(CliError::config(format!("n ≥ 2 required, got n = {}", cfg.n)));
    }
    let spec = cfg.model.build(&base)?;
    let burn_in = cfg
        .burn_in
        .unwrap_or_else(|| default_burn_in(spec.rho_norm(), DEFAULT_SERIES_TOL));
    let sample = simulate(&spec, cfg.n, burn_in)?;

    let mut out = Outputs::new(manifest);
    out.add("sample.csv", io::sample_to_csv(&sample));
    out.add("provenance.json", provenance("simulate", &text, spec.seed(), spec.grid().len()));
    out.write()
}

pub fn cmd_estimate(manifest: &RunManifest) -> CliResult<()> {
    let (cfg, text, base): (io::EstimateConfig, _, _) = load_config(&manifest.config)?;
    let sample = io::sample_from_csv(&io::read_text(&cfg.sample_path(&base))?)?;
    let est_cfg: EstimatorConfig = cfg.estimator.clone();
    let estimate = estimate_rho(&sample, &est_cfg)?;

    let file = EstimateFile::new(&estimate, sample.n(), &est_cfg);
    println!("k_n = {}", estimate.k_n);
    for (j, c) in estimate.coefficients.iter().enumerate() {
        println!("rho_n[{}] = {}", j + 1, io::fmt_f64(*c));
    }
    println!("trace_norm = {}", io::fmt_f64(file.trace_norm));

    let mut out = Outputs::new(manifest);
    out.add("estimate.json", io::to_json(&file));
    out.add("rho_hat.csv", io::operator_to_csv(&estimate.operator));
    out.add(
        "provenance.json",
        provenance("estimate", &text, manifest.seed_override.unwrap_or(0), sample.grid().len()),
    );
    out.write()
}

#[derive(Serialize)]
struct PredictionFile {
    m: usize,
    k_n: usize,
    prediction_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_h: Option<f64>,
}

pub fn cmd_predict(manifest: &RunManifest) -> CliResult<()> {
    let (cfg, text, base): (PredictConfig, _, _) = load_config(&manifest.config)?;
    let cfg = cfg.resolved(&base);
    let file: EstimateFile = io::parse_json(
        &io::read_text(&cfg.estimate)?,
        &cfg.estimate.display().to_string(),
    )?;
    let operator = io::operator_from_csv(&io::read_text(&cfg.kernel)?)?;
    let estimate = file.into_estimate(operator)?;
    let (_, rows) = io::functions_from_csv(&io::read_text(&cfg.last)?)?;
    let last: GridFunction = rows
        .last()
        .cloned()
        .ok_or_else(|| CliError::config(format!("{} has no observation rows", cfg.last.display())))?;
    let m = estimate.operator.dim();
    if last.values().len() != m {
        return Err(CliError::config(format!(
            "grid mismatch: estimate has m = {m}, observation has m = {}",
            last.values().len()
        )));
    }
    let rho_true = match &cfg.rho_true {
        Some(p) => Some(io::operator_from_csv(&io::read_text(p)?)?),
        None => None,
    };
    let prediction = predict_with_oracle(&estimate, &last, rho_true.as_ref())?;

    let summary = PredictionFile {
        m,
        k_n: estimate.k_n,
        prediction_norm: crate::grid::h_norm(&prediction.x_hat),
        error_h: prediction.error_h,
    };
    let mut out = Outputs::new(manifest);
    out.add(
        "prediction.csv",
        io::functions_to_csv(estimate.operator.grid(), std::slice::from_ref(&prediction.x_hat)),
    );
    out.add("prediction.json", io::to_json(&summary));
    out.add(
        "provenance.json",
        provenance("predict", &text, manifest.seed_override.unwrap_or(0), m),
    );
    out.write()
}

pub fn cmd_study(manifest: &RunManifest) -> CliResult<()> {
    let (mut cfg, text, base): (StudyFileConfig, _, _) = load_config(&manifest.config)?;
    if let Some(seed) = manifest.seed_override {
        cfg.master_seed = seed;
    }
    if !(0.0..=1.0).contains(&cfg.failure_budget) {
        return Err(CliError::config("failure_budget must lie in [0, 1]"));
    }
    let study = Study::new(cfg.build(&base, manifest.jobs)?)?;
    let report = study.run()?;

    // Work units depend only on their seed: recomputing one must reproduce it.
    let deterministic = study.run_unit(0) == report.rows[0];
    let summary = summarize(&report, study.truth().eigen.values());

    let mut out = Outputs::new(manifest);
    out.add("report.csv", io::report_to_csv(&report));
    out.add("summary.json", io::to_json(&summary));
    out.add(
        "provenance.json",
        provenance("study", &text, cfg.master_seed, study.config().spec.grid().len()),
    );
    out.write()?;

    println!(
        "{} rows, {} failed ({:.1}%)",
        report.rows.len(),
        report.failures(),
        100.0 * report.failure_fraction()
    );
    for (name, value) in &summary.trends {
        println!("trend {name} = {value:.4}");
    }

    if report.failure_fraction() > cfg.failure_budget {
        return Err(CliError {
            code: EXIT_STUDY,
            message: format!(
                "{} of {} replicates failed, above the budget of {}",
                report.failures(),
                report.rows.len(),
                cfg.failure_budget
            ),
        });
    }
    if !summary.hard_checks.passed() || !deterministic {
        return Err(CliError {
            code: EXIT_STUDY,
            message: format!(
                "per-row checks failed: {:?}, deterministic rerun: {deterministic}",
                summary.hard_checks
            ),
        });
    }
    Ok(())
}
