//! Training objective on black-box probability vectors: soft cross-entropy
//! against the clean reply, a cosine alignment term and an RBF-kernel MMD
//! between the clean and denoised reply sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} has invalid entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `-Σ p_clean[l] ln p_denoised[l]` with the logarithm floored at
/// [`LOG_FLOOR`].
pub fn soft_cross_entropy(p_clean: &[f64], p_denoised: &[f64]) -> Result<f64> {
    if p_clean.len() != p_denoised.len() || p_clean.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cross-entropy over vectors of length {} and {}",
            p_clean.len(),
            p_denoised.len()
        )));
    }
    check_distribution("target distribution", p_clean)?;
    check_distribution("predicted distribution", p_denoised)?;
    Ok(p_clean
        .iter()
        .zip(p_denoised)
        .map(|(t, p)| -t * p.max(LOG_FLOOR).ln())
        .sum())
}

/// Gradient of the soft cross-entropy w.r.t. the logits behind
/// `p_denoised` (a softmax output): `p_denoised · Σt − t`.
pub fn soft_cross_entropy_logit_grad(p_clean: &[f64], p_denoised: &[f64]) -> Vec<f64> {
    let mass: f64 = p_clean.iter().sum();
    p_denoised
        .iter()
        .zip(p_clean)
        .map(|(p, t)| p * mass - t)
        .collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}

/// `1 − cos(a, b)`, in `[0, 2]`. A zero-norm argument yields 1.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine loss of a zero-norm vector; using 1");
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Kernel bandwidth choice for [`mmd_rbf`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample (1 if that is 0).
    Median,
    Fixed(f64),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the pairwise Euclidean distances of `X ∪ Y`; falls back to 1
/// when all points coincide.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

impl Bandwidth {
    pub fn resolve(self, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
        match self {
            Bandwidth::Median => Ok(median_bandwidth(x, y)),
            Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
            Bandwidth::Fixed(h) => Err(Error::InvalidArgument(format!("bandwidth {h} must be positive"))),
        }
    }
}

/// Biased (V-statistic) squared MMD with kernel `exp(−‖a−b‖²/(2h²))`.
pub fn mmd_rbf(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    let h = bandwidth.resolve(x, y)?;
    mmd_rbf_with(x, y, h)
}

fn mmd_rbf_with(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("MMD needs non-empty sample sets".into()));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument(format!(
            "MMD sample vectors must all have dimension {dim}"
        )));
    }
    let gamma = 1.0 / (2.0 * h * h);
    let mean_kernel = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for u in a {
            for v in b {
                s += (-gamma * sq_dist(u, v)).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let v = mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y);
    Ok(v.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cs: f64,
    pub lambda_mmd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cs: 1.0,
            lambda_mmd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, path: &str, problems: &mut Vec<String>) {
        for (name, v) in [("lambda_cs", self.lambda_cs), ("lambda_mmd", self.lambda_mmd)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{path}.{name} = {v} must be finite and non-negative"));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cs: f64,
    pub mmd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(ce: f64, cs: f64, mmd: f64, weights: &LossWeights) -> Self {
        Self {
            ce,
            cs,
            mmd,
            total: ce + weights.lambda_cs * cs + weights.lambda_mmd * mmd,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.cs.is_finite() && self.mmd.is_finite() && self.total.is_finite()
    }
}

/// Batch objective: cross-entropy and cosine terms are means over the
/// batch, MMD is computed once between the clean and denoised reply sets.
pub fn total_loss(
    clean: &[Vec<f64>],
    denoised: &[Vec<f64>],
    weights: &LossWeights,
    bandwidth: Bandwidth,
) -> Result<LossBreakdown> {
    Ok(BatchObjective::new(clean.to_vec(), denoised.to_vec(), *weights, bandwidth)?.base())
}

/// The batch objective viewed as a function of one example's reply, with
/// every other reply and the kernel bandwidth held fixed. This is the
/// function a zeroth-order estimator probes for that example.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    clean: Vec<Vec<f64>>,
    denoised: Vec<Vec<f64>>,
    weights: LossWeights,
    bandwidth: f64,
    base: LossBreakdown,
}

impl BatchObjective {
    pub fn new(
        clean: Vec<Vec<f64>>,
        denoised: Vec<Vec<f64>>,
        weights: LossWeights,
        bandwidth: Bandwidth,
    ) -> Result<Self> {
        if clean.is_empty() {
            return Err(Error::InvalidArgument("loss over an empty batch".into()));
        }
        if clean.len() != denoised.len() {
            return Err(Error::InvalidArgument(format!(
                "{} clean replies but {} denoised replies",
                clean.len(),
                denoised.len()
            )));
        }
        let h = bandwidth.resolve(&clean, &denoised)?;
        let mut obj = Self {
            clean,
            denoised,
            weights,
            bandwidth: h,
            base: LossBreakdown::default(),
        };
        obj.base = obj.evaluate(None)?;
        Ok(obj)
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// The objective at the unperturbed replies.
    pub fn base(&self) -> LossBreakdown {
        self.base
    }

    /// The objective with example `i`'s denoised reply replaced by `reply`.
    pub fn with_reply(&self, i: usize, reply: &[f64]) -> Result<LossBreakdown> {
        self.evaluate(Some((i, reply)))
    }

    fn evaluate(&self, swap: Option<(usize, &[f64])>) -> Result<LossBreakdown> {
        let n = self.len() as f64;
        let row = |j: usize| -> &[f64] {
            match swap {
                Some((i, r)) if i == j => r,
                _ => &self.denoised[j],
            }
        };
        let mut ce = 0.0;
        let mut cs = 0.0;
        for (j, c) in self.clean.iter().enumerate() {
            ce += soft_cross_entropy(c, row(j))?;
            cs += cosine_loss(c, row(j));
        }
        let mmd = match swap {
            Some((i, r)) => {
                let mut d = self.denoised.clone();
                d[i] = r.to_vec();
                mmd_rbf_with(&self.clean, &d, self.bandwidth)?
            }
            None => mmd_rbf_with(&self.clean, &self.denoised, self.bandwidth)?,
        };
        Ok(LossBreakdown::combine(ce / n, cs / n, mmd, &self.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut impl Rng, l: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert_eq!(soft_cross_entropy(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        let ce = soft_cross_entropy(&[0.0, 0.0, 1.0, 0.0], &[0.25; 4]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.3863).abs() < 1e-4);
        assert!(soft_cross_entropy(&[1.2, -0.2], &[0.5, 0.5]).is_err());
        assert!(soft_cross_entropy(&[0.5, 0.4], &[0.5, 0.5]).is_err());
        assert!(soft_cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_of_self_is_entropy_and_bounds_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = random_simplex(&mut rng, 5);
            let q = random_simplex(&mut rng, 5);
            assert!((soft_cross_entropy(&p, &p).unwrap() - entropy(&p)).abs() < 1e-9);
            assert!(soft_cross_entropy(&p, &q).unwrap() >= entropy(&p) - 1e-12);
        }
    }

    #[test]
    fn cosine_closed_forms_and_scale_invariance() {
        assert!(cosine_loss(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert!((cosine_loss(&[1.0, -3.0], &[-1.0, 3.0]) - 2.0).abs() < 1e-15);
        assert!((cosine_loss(&[1.0, 0.0], &[1.0, 1.0]) - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        assert!((cosine_loss(&[1.0, 0.0], &[1.0, 1.0]) - 0.2929).abs() < 1e-4);
        assert_eq!(cosine_loss(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0));
            let va: Vec<f64> = v.iter().map(|x| x * a).collect();
            let wb: Vec<f64> = w.iter().map(|x| x * b).collect();
            assert!((cosine_loss(&va, &wb) - cosine_loss(&v, &w)).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_singletons_and_identity() {
        let m = mmd_rbf(&[vec![0.0]], &[vec![2.0]], Bandwidth::Fixed(1.0)).unwrap();
        assert!((m - (2.0 - 2.0 * (-2f64).exp())).abs() < 1e-12);
        assert!((m - 1.7293).abs() < 1e-4);
        let x = vec![vec![0.1, 0.2], vec![0.5, 0.3], vec![0.9, 0.0]];
        assert!(mmd_rbf(&x, &x, Bandwidth::Median).unwrap().abs() < 1e-12);
        assert!(mmd_rbf(&x, &[vec![1.0]], Bandwidth::Median).is_err());
        assert_eq!(median_bandwidth(&[vec![1.0, 1.0]], &[vec![1.0, 1.0]]), 1.0);
    }

    #[test]
    fn mmd_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..7).map(|_| random_simplex(&mut rng, 3)).collect();
        let y: Vec<Vec<f64>> = (0..5).map(|_| random_simplex(&mut rng, 3)).collect();
        let a = mmd_rbf(&x, &y, Bandwidth::Median).unwrap();
        let b = mmd_rbf(&y, &x, Bandwidth::Median).unwrap();
        assert!((a - b).abs() < 1e-12);
        let mut xr = x.clone();
        xr.reverse();
        let mut yr = y.clone();
        yr.rotate_left(2);
        assert!((mmd_rbf(&xr, &yr, Bandwidth::Median).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn mmd_same_distribution_below_permutation_threshold() {
        use rand::seq::SliceRandom;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        };
        let x = draw(200);
        let y = draw(200);
        let h = median_bandwidth(&x, &y);
        let observed = mmd_rbf(&x, &y, Bandwidth::Fixed(h)).unwrap();
        let mut pooled: Vec<Vec<f64>> = x.iter().chain(&y).cloned().collect();
        let mut null: Vec<f64> = (0..100)
            .map(|_| {
                pooled.shuffle(&mut rng);
                mmd_rbf(&pooled[..200], &pooled[200..], Bandwidth::Fixed(h)).unwrap()
            })
            .collect();
        null.sort_by(f64::total_cmp);
        assert!(observed < null[94], "{observed} vs {}", null[94]);
    }

    #[test]
    fn breakdown_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clean: Vec<Vec<f64>> = (0..6).map(|_| random_simplex(&mut rng, 3)).collect();
        let den: Vec<Vec<f64>> = (0..6).map(|_| random_simplex(&mut rng, 3)).collect();
        let zero = LossWeights {
            lambda_cs: 0.0,
            lambda_mmd: 0.0,
        };
        let b = total_loss(&clean, &den, &zero, Bandwidth::Median).unwrap();
        assert_eq!(b.total, b.ce);
        let one = LossWeights::default();
        let b1 = total_loss(&clean, &den, &one, Bandwidth::Median).unwrap();
        assert!((b1.total - (b1.ce + b1.cs + b1.mmd)).abs() < 1e-12);
        assert!(b1.cs > 0.0 && b1.mmd > 0.0);
        // linear in each weight
        let t = |cs: f64, mmd: f64| {
            total_loss(
                &clean,
                &den,
                &LossWeights {
                    lambda_cs: cs,
                    lambda_mmd: mmd,
                },
                Bandwidth::Median,
            )
            .unwrap()
            .total
        };
        assert!((t(2.0, 0.0) - 2.0 * t(1.0, 0.0) + t(0.0, 0.0)).abs() < 1e-12);
        assert!((t(0.0, 3.0) - 3.0 * t(0.0, 1.0) + 2.0 * t(0.0, 0.0)).abs() < 1e-12);

        let perfect = total_loss(&clean, &clean, &one, Bandwidth::Median).unwrap();
        let h: f64 = clean.iter().map(|p| entropy(p)).sum::<f64>() / 6.0;
        assert!(perfect.cs.abs() < 1e-12 && perfect.mmd.abs() < 1e-12);
        assert!((perfect.total - h).abs() < 1e-12);
        assert!(total_loss(&[], &[], &one, Bandwidth::Median).is_err());
    }

    #[test]
    fn swapping_a_reply_matches_a_fresh_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clean: Vec<Vec<f64>> = (0..4).map(|_| random_simplex(&mut rng, 3)).collect();
        let mut den: Vec<Vec<f64>> = (0..4).map(|_| random_simplex(&mut rng, 3)).collect();
        let obj = BatchObjective::new(clean.clone(), den.clone(), LossWeights::default(), Bandwidth::Median)
            .unwrap();
        let r = random_simplex(&mut rng, 3);
        let swapped = obj.with_reply(2, &r).unwrap();
        den[2] = r;
        let fresh = BatchObjective::new(clean, den, LossWeights::default(), Bandwidth::Fixed(obj.bandwidth()))
            .unwrap()
            .base();
        assert!((swapped.total - fresh.total).abs() < 1e-14);
    }
}
