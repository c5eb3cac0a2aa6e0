//! Monte-Carlo prediction and certification of the smoothed classifier
//! `x ↦ argmax_l P[f(proj(D(x + η))) = l]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{clopper_pearson_lower, gaussian_quantile};
use crate::blackbox::{argmax, BlackBox, Phase};
use crate::data::seed::{derive_seed, tag};
use crate::data::{gaussian_noise, Dataset};
use crate::error::{Error, Result};
use crate::models::Defense;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub sigma: f64,
    /// Samples used to pick the candidate class.
    pub n0: usize,
    /// Samples used for the confidence bound.
    pub n: usize,
    pub alpha: f64,
    pub radii_grid: Vec<f64>,
    /// Noisy copies per black-box call.
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_batch() -> usize {
    100
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            n0: 100,
            n: 1000,
            alpha: 0.001,
            radii_grid: vec![0.0, 0.25, 0.5, 0.75],
            batch: default_batch(),
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self, path: &str, problems: &mut Vec<String>) {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            problems.push(format!("{path}.sigma = {} must be positive", self.sigma));
        }
        if self.n0 == 0 {
            problems.push(format!("{path}.n0 must be at least 1"));
        }
        if self.n < self.n0 {
            problems.push(format!("{path}.n = {} must be >= n0 = {}", self.n, self.n0));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push(format!("{path}.alpha = {} must lie in (0, 1)", self.alpha));
        }
        if self.batch == 0 {
            problems.push(format!("{path}.batch must be at least 1"));
        }
        let g = &self.radii_grid;
        if g.first() != Some(&0.0) {
            problems.push(format!("{path}.radii_grid must start at 0"));
        }
        if g.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || g.windows(2).any(|w| w[1] <= w[0]) {
            problems.push(format!("{path}.radii_grid must be finite and strictly ascending"));
        }
    }
}

/// The denoiser-prepended black box, queried under Gaussian noise.
pub struct SmoothedClassifier<'a> {
    pub blackbox: &'a BlackBox,
    pub defense: &'a Defense,
}

impl SmoothedClassifier<'_> {
    /// Tallies the black-box labels of `count` noisy copies of `x` (a
    /// single input with a leading dimension of 1).
    pub fn sample_under_noise(
        &self,
        x: &Tensor,
        count: usize,
        sigma: f64,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<u64>> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        if x.batch() != 1 {
            return Err(Error::InvalidArgument(format!("expected one input, got a batch of {}", x.batch())));
        }
        let mut tally = vec![0u64; self.blackbox.classes()];
        let mut remaining = count;
        while remaining > 0 {
            let m = remaining.min(batch.max(1));
            let copies = Tensor::stack(&vec![x.clone(); m])?;
            let x_star = copies.add(&gaussian_noise(copies.shape(), sigma, rng)?)?;
            let input = self.blackbox.project(&self.defense.apply(&x_star)?);
            for reply in self.blackbox.query(Phase::Certification, &input)? {
                tally[reply.predicted_label] += 1;
            }
            remaining -= m;
        }
        Ok(tally)
    }

    pub fn certify(&self, x: &Tensor, cfg: &CertifyConfig, seed: u64) -> CertificationResult {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = |rng: &mut ChaCha8Rng| -> Result<(Vec<u64>, Vec<u64>)> {
            let selection = self.sample_under_noise(x, cfg.n0, cfg.sigma, cfg.batch, rng)?;
            let estimation = self.sample_under_noise(x, cfg.n, cfg.sigma, cfg.batch, rng)?;
            Ok((selection, estimation))
        };
        match run(&mut rng) {
            Ok((selection, estimation)) => decide(&selection, &estimation, cfg),
            Err(e) => CertificationResult {
                label: None,
                radius: 0.0,
                p_lower: 0.0,
                counts: vec![0; self.blackbox.classes()],
                queries_spent: 0,
                note: Some(e.to_string()),
            },
        }
    }
}

/// Turns selection and estimation tallies into a certificate.
pub fn decide(selection: &[u64], estimation: &[u64], cfg: &CertifyConfig) -> CertificationResult {
    let top = argmax(&selection.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let n: u64 = estimation.iter().sum();
    let counts: Vec<u64> = selection.iter().zip(estimation).map(|(a, b)| a + b).collect();
    let queries_spent = counts.iter().sum();
    let p_lower = match clopper_pearson_lower(estimation[top], n, cfg.alpha) {
        Ok(p) => p,
        Err(e) => {
            return CertificationResult {
                label: None,
                radius: 0.0,
                p_lower: 0.0,
                counts,
                queries_spent,
                note: Some(e.to_string()),
            }
        }
    };
    if p_lower <= 0.5 {
        return CertificationResult {
            label: None,
            radius: 0.0,
            p_lower,
            counts,
            queries_spent,
            note: None,
        };
    }
    CertificationResult {
        label: Some(top),
        radius: radius(p_lower, cfg.sigma),
        p_lower,
        counts,
        queries_spent,
        note: None,
    }
}

/// `σ Φ⁻¹(p_lower)` for `p_lower > 1/2`, else 0.
pub fn radius(p_lower: f64, sigma: f64) -> f64 {
    if p_lower <= 0.5 {
        return 0.0;
    }
    let p = p_lower.min(1.0 - f64::EPSILON);
    sigma * gaussian_quantile(p).expect("p in (1/2, 1)")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertificationResult {
    /// `None` means abstain.
    pub label: Option<usize>,
    pub radius: f64,
    pub p_lower: f64,
    /// Label tallies over selection and estimation samples together.
    pub counts: Vec<u64>,
    pub queries_spent: u64,
    /// Why sampling failed, if it did.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleCertificate {
    pub example_id: usize,
    pub true_label: usize,
    pub result: CertificationResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub radius: f64,
    pub certified_accuracy: f64,
    pub n_examples: usize,
}

/// Fraction of examples certified with the true label at radius `≥ r`, for
/// every `r` in the grid.
pub fn curve_from_certificates(certs: &[ExampleCertificate], grid: &[f64]) -> Vec<CurvePoint> {
    let n = certs.len();
    grid.iter()
        .map(|&r| {
            let hits = certs
                .iter()
                .filter(|c| c.result.label == Some(c.true_label) && c.result.radius >= r)
                .count();
            CurvePoint {
                radius: r,
                certified_accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
                n_examples: n,
            }
        })
        .collect()
}

/// Per-example seed used by [`certified_accuracy_curve`].
pub fn example_seed(seed: u64, example_id: usize) -> u64 {
    derive_seed(seed, &[tag::CERTIFY, example_id as u64])
}

/// Certifies every example (in parallel) and summarises the curve.
pub fn certified_accuracy_curve(
    model: &SmoothedClassifier<'_>,
    data: &Dataset,
    cfg: &CertifyConfig,
    seed: u64,
) -> Result<(Vec<ExampleCertificate>, Vec<CurvePoint>)> {
    let mut problems = Vec::new();
    cfg.validate("certify", &mut problems);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot certify an empty dataset".into()));
    }
    let certs: Vec<ExampleCertificate> = (0..data.len())
        .into_par_iter()
        .map(|i| ExampleCertificate {
            example_id: i,
            true_label: data.labels[i],
            result: model.certify(&data.image(i), cfg, example_seed(seed, i)),
        })
        .collect();
    let curve = curve_from_certificates(&certs, &cfg.radii_grid);
    Ok((certs, curve))
}
