//! Randomized-smoothing certification with exact binomial bounds.

mod report;
mod smoothing;
mod stats;

pub use report::{certificates_csv, curve_csv, parse_curve_csv};
pub use smoothing::{
    certified_accuracy_curve, curve_from_certificates, decide, example_seed, radius, CertificationResult,
    CertifyConfig, CurvePoint, ExampleCertificate, SmoothedClassifier,
};
pub use stats::{binomial_upper_tail, clopper_pearson_lower, gaussian_cdf, gaussian_quantile};
