//! Simulation, diagonal componentwise estimation and convergence studies for
//! autoregressive Hilbertian processes of order one on a discretized `L²([0,1])`.

pub mod cli;
pub mod error;
pub mod estimate;
pub mod grid;
pub mod io;
pub mod model;
pub mod operator;
pub mod predict;
pub mod study;

pub use error::{Error, Result};
pub use estimate::{estimate_rho, EstimatorConfig, RhoEstimate};
pub use grid::{h_norm, inner_product, Grid, GridFunction};
pub use model::{simulate, Arh1Spec, InnovationMode, Preset, PresetParams, Sample};
pub use operator::{align_sign, tensor_product, EigenSystem, LinOperator};
pub use study::{run_study, StudyConfig, StudyReport};
