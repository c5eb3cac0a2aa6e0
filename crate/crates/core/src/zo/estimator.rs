//! Zeroth-order gradient estimators over a batched loss oracle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Random directions, `q` forward differences.
    Rge,
    /// Coordinate-wise central differences.
    Cge,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Rge => "rge",
            Estimator::Cge => "cge",
        }
    }
}

/// Distribution of the RGE probe directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directions {
    /// Uniform on the unit sphere, scale `d / (ξ q)`.
    Sphere,
    /// Standard normal, scale `1 / (ξ q)`.
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoConfig {
    pub estimator: Estimator,
    /// RGE direction count.
    pub q: usize,
    /// Finite-difference step.
    pub xi: f64,
    #[serde(default = "default_directions")]
    pub directions: Directions,
    /// Divide central differences by `ξ` instead of `2ξ`.
    #[serde(default)]
    pub cge_divide_by_xi: bool,
}

fn default_directions() -> Directions {
    Directions::Sphere
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Rge,
            q: 20,
            xi: 0.005,
            directions: Directions::Sphere,
            cge_divide_by_xi: false,
        }
    }
}

impl ZoConfig {
    pub fn validate(&self, path: &str, problems: &mut Vec<String>) {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            problems.push(format!("{path}.xi = {} must be positive", self.xi));
        }
        if self.estimator == Estimator::Rge && self.q == 0 {
            problems.push(format!("{path}.q must be at least 1 for rge"));
        }
    }

    /// Oracle evaluations per estimate at dimension `dim`, base included.
    pub fn queries_per_estimate(&self, dim: usize) -> u64 {
        match self.estimator {
            Estimator::Rge => self.q as u64 + 1,
            Estimator::Cge => 2 * dim as u64 + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub vector: Tensor,
    pub estimator: Estimator,
    /// Oracle evaluations attributable to this estimate, base included.
    pub queries_spent: u64,
    pub xi: f64,
    pub base_loss: f64,
}

/// A loss oracle evaluated at many points at once; results are in input
/// order.
pub type BatchLoss<'a> = dyn Fn(&[Tensor]) -> Result<Vec<f64>> + Sync + 'a;

/// Points per oracle call when evaluations are spread over threads.
const EVAL_CHUNK: usize = 16;

fn evaluate(loss: &BatchLoss, points: &[Tensor]) -> Result<Vec<f64>> {
    let parts: Vec<Vec<f64>> = points
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let values = loss(chunk)?;
            if values.len() != chunk.len() {
                return Err(Error::InvalidArgument(format!(
                    "loss oracle returned {} values for {} points",
                    values.len(),
                    chunk.len()
                )));
            }
            Ok(values)
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = parts.into_iter().flatten().collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss value at probe {pos} is {}", values[pos])));
    }
    Ok(values)
}

fn base_value(loss: &BatchLoss, z0: &Tensor) -> Result<f64> {
    Ok(evaluate(loss, std::slice::from_ref(z0))?[0])
}

fn direction(dim: usize, kind: Directions, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        if kind == Directions::Normal {
            return u;
        }
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            return u.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Randomized gradient estimate at `z0` with `q + 1` oracle evaluations.
pub fn rge_estimate(loss: &BatchLoss, z0: &Tensor, cfg: &ZoConfig, rng: &mut impl Rng) -> Result<GradientEstimate> {
    let base = base_value(loss, z0)?;
    rge_estimate_with_base(loss, z0, base, cfg, rng)
}

/// As [`rge_estimate`], reusing an already known `L(z0)`; performs `q`
/// evaluations.
pub fn rge_estimate_with_base(
    loss: &BatchLoss,
    z0: &Tensor,
    base: f64,
    cfg: &ZoConfig,
    rng: &mut impl Rng,
) -> Result<GradientEstimate> {
    if cfg.q == 0 {
        return Err(Error::InvalidArgument("rge needs q >= 1".into()));
    }
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("base loss is {base}")));
    }
    let d = z0.numel();
    let dirs: Vec<Vec<f64>> = (0..cfg.q).map(|_| direction(d, cfg.directions, rng)).collect();
    let points: Vec<Tensor> = dirs
        .iter()
        .map(|u| {
            let mut p = z0.clone();
            for (v, du) in p.data_mut().iter_mut().zip(u) {
                *v += cfg.xi * du;
            }
            p
        })
        .collect();
    let values = evaluate(loss, &points)?;
    let scale = match cfg.directions {
        Directions::Sphere => d as f64,
        Directions::Normal => 1.0,
    } / (cfg.xi * cfg.q as f64);
    let mut g = vec![0.0; d];
    for (u, v) in dirs.iter().zip(&values) {
        let c = scale * (v - base);
        for (gi, ui) in g.iter_mut().zip(u) {
            *gi += c * ui;
        }
    }
    Ok(GradientEstimate {
        vector: Tensor::new(z0.shape().to_vec(), g)?,
        estimator: Estimator::Rge,
        queries_spent: cfg.q as u64 + 1,
        xi: cfg.xi,
        base_loss: base,
    })
}

/// Coordinate-wise central-difference estimate with `2·dim + 1`
/// evaluations (the base value is only logged).
pub fn cge_estimate(loss: &BatchLoss, z0: &Tensor, cfg: &ZoConfig) -> Result<GradientEstimate> {
    let base = base_value(loss, z0)?;
    cge_estimate_with_base(loss, z0, base, cfg)
}

/// As [`cge_estimate`], reusing an already known `L(z0)`; performs `2·dim`
/// evaluations.
pub fn cge_estimate_with_base(loss: &BatchLoss, z0: &Tensor, base: f64, cfg: &ZoConfig) -> Result<GradientEstimate> {
    let d = z0.numel();
    let mut points = Vec::with_capacity(2 * d);
    for k in 0..d {
        for sign in [1.0, -1.0] {
            let mut p = z0.clone();
            p.data_mut()[k] += sign * cfg.xi;
            points.push(p);
        }
    }
    let values = evaluate(loss, &points)?;
    let denom = if cfg.cge_divide_by_xi { cfg.xi } else { 2.0 * cfg.xi };
    let g: Vec<f64> = values.chunks(2).map(|pm| (pm[0] - pm[1]) / denom).collect();
    Ok(GradientEstimate {
        vector: Tensor::new(z0.shape().to_vec(), g)?,
        estimator: Estimator::Cge,
        queries_spent: 2 * d as u64 + 1,
        xi: cfg.xi,
        base_loss: base,
    })
}

/// Dispatches on `cfg.estimator` given a known base value.
pub fn estimate_with_base(
    loss: &BatchLoss,
    z0: &Tensor,
    base: f64,
    cfg: &ZoConfig,
    rng: &mut impl Rng,
) -> Result<GradientEstimate> {
    match cfg.estimator {
        Estimator::Rge => rge_estimate_with_base(loss, z0, base, cfg, rng),
        Estimator::Cge => cge_estimate_with_base(loss, z0, base, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn pointwise(f: impl Fn(&[f64]) -> f64 + Sync) -> impl Fn(&[Tensor]) -> Result<Vec<f64>> + Sync {
        move |pts: &[Tensor]| Ok(pts.iter().map(|p| f(p.data())).collect())
    }

    #[test]
    fn constant_loss_gives_zero_estimate() {
        let f = pointwise(|_| 3.5);
        let z0 = Tensor::from_fn(&[6], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ZoConfig::default();
        assert!(rge_estimate(&f, &z0, &cfg, &mut rng).unwrap().vector.data().iter().all(|&v| v == 0.0));
        assert!(cge_estimate(&f, &z0, &cfg).unwrap().vector.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn evaluation_counts() {
        let calls = AtomicUsize::new(0);
        let f = |pts: &[Tensor]| {
            calls.fetch_add(pts.len(), Ordering::Relaxed);
            Ok(pts.iter().map(|p| p.sum()).collect())
        };
        let z0 = Tensor::zeros(&[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ZoConfig {
            q: 7,
            ..Default::default()
        };
        let e = rge_estimate(&f, &z0, &cfg, &mut rng).unwrap();
        assert_eq!((e.queries_spent, calls.load(Ordering::Relaxed)), (8, 8));
        calls.store(0, Ordering::Relaxed);
        let e = cge_estimate(&f, &z0, &cfg).unwrap();
        assert_eq!((e.queries_spent, calls.load(Ordering::Relaxed)), (11, 11));
    }

    #[test]
    fn cge_cubic_taylor_term() {
        let f = pointwise(|z| z[0].powi(3));
        let z0 = Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let cfg = ZoConfig {
            estimator: Estimator::Cge,
            xi: 0.005,
            ..Default::default()
        };
        let g = cge_estimate(&f, &z0, &cfg).unwrap();
        assert!((g.vector.data()[0] - 3.000025).abs() < 1e-9);
        let literal = cge_estimate(&f, &z0, &ZoConfig {
            cge_divide_by_xi: true,
            ..cfg
        })
        .unwrap();
        assert!((literal.vector.data()[0] - 2.0 * 3.000025).abs() < 1e-8);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let f = pointwise(|z| if z[0] > 0.0 { f64::NAN } else { 0.0 });
        let z0 = Tensor::zeros(&[2]);
        let cfg = ZoConfig {
            estimator: Estimator::Cge,
            ..Default::default()
        };
        assert!(matches!(cge_estimate(&f, &z0, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fixed_seed_reproducible() {
        let f = pointwise(|z| z.iter().map(|v| v.sin()).sum());
        let z0 = Tensor::from_fn(&[4], |i| 0.3 * i as f64);
        let cfg = ZoConfig::default();
        let a = rge_estimate(&f, &z0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = rge_estimate(&f, &z0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
