//! Configuration-driven experiment pipeline: dataset cache, target
//! training, defence training, certification, gradient checks and the
//! comparison report.

mod commands;
mod config;
mod report;

pub use commands::{
    certify, datasets, defend, gradcheck, load_defense, resolve_estimator, run_name, sha256_hex, train_target,
    AccuracyRow, CertifySummary, DefendSummary, GradcheckSummary, Manifest, Method, TargetSummary, Timing,
    METHOD_MATRIX,
};
pub use config::{DatasetConfig, ExperimentConfig, Overrides};
pub use report::{collect, write_report, Report, ReportRow};
