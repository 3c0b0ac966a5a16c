//! Skill-prevalence estimation from non-probability job-ad samples.
//!
//! Pseudo-design weights are calibrated to estimated population totals, either
//! directly (GREG under the χ² distance) or through a fitted working model
//! (logistic, LASSO or adaptive LASSO). Uncertainty comes from a bootstrap that
//! resamples the ads and perturbs the published totals at the same time.
//!
//! ```no_run
//! use skillcal::{simulator, estimators, SkillCatalog};
//!
//! let design = simulator::SyntheticDesign::fixture();
//! let out = simulator::generate(&design, 7).unwrap();
//! let specs = estimators::EstimatorSpec::all();
//! let cache = estimators::ModelCache::build(&out.sample, &specs, &Default::default()).unwrap();
//! for wave in out.sample.waves() {
//!     let est = estimators::estimate_wave(&specs, &out.sample, &out.totals[&wave], wave, &cache).unwrap();
//!     println!("{} estimates for {wave}", est.len());
//! }
//! # let _ = SkillCatalog::standard();
//! ```

// `!(a > b)` is used on purpose so that NaN fails the check; numeric kernels
// index several parallel arrays with one counter.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bootstrap;
pub mod calibration;
pub mod data;
pub mod design;
pub mod estimators;
pub mod glm;
pub mod metrics;
pub mod pipeline;
pub mod simulator;

pub use bootstrap::{BootstrapConfig, BootstrapDistribution, BootstrapOutcome};
pub use calibration::{WeightBasis, WeightVector};
pub use data::{AdRecord, AdSample, Covariate, SkillCatalog, SkillSet, TotalsTable, Wave};
pub use design::{CollapseMap, ColumnLabel, DesignMatrix, TotalsVector};
pub use estimators::{EstimatorName, EstimatorSpec, ModelCache, PointEstimate};
pub use glm::{FittedMeans, ModelFit};
pub use metrics::DiagnosticReport;
pub use pipeline::RunConfig;
pub use simulator::{GroundTruth, SyntheticDesign};

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Design(#[from] design::DesignError),
    #[error(transparent)]
    Calibration(#[from] calibration::CalibrationError),
    #[error(transparent)]
    Glm(#[from] glm::GlmError),
    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),
    #[error(transparent)]
    Bootstrap(#[from] bootstrap::BootstrapError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Simulator(#[from] simulator::SimulatorError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
