//! Gaussian quantile and exact binomial confidence bounds.

use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Acklam's rational approximation (relative error about 1e-9).
fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// `Φ⁻¹(p)`: a rational initial guess refined by Halley steps on the CDF.
pub fn gaussian_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile needs 0 < p < 1, got {p}")));
    }
    if p > 0.5 {
        return Ok(-gaussian_quantile(1.0 - p)?);
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let mut x = acklam(p);
    for _ in 0..2 {
        let e = gaussian_cdf(x) - p;
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let u = e / density;
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// `P[Bin(n, p) ≥ k]`.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        1.0
    } else if k > n {
        0.0
    } else {
        beta_reg(k as f64, (n - k + 1) as f64, p)
    }
}

/// One-sided exact (Clopper–Pearson) lower bound at level `1 − alpha`: the
/// `p` solving `P[Bin(n, p) ≥ k] = alpha`, found by bisection.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 0 <= k <= n, n >= 1 (k = {k}, n = {n})")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, k as f64 / n as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binomial_upper_tail(k, n, mid) > alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_known_values() {
        assert_eq!(gaussian_quantile(0.5).unwrap(), 0.0);
        assert!((gaussian_quantile(0.975).unwrap() - 1.959964).abs() < 1e-6);
        assert!((gaussian_quantile(0.99).unwrap() - 2.32635).abs() < 1e-5);
        assert!(gaussian_quantile(0.0).is_err());
        assert!(gaussian_quantile(1.0).is_err());
        assert!(gaussian_quantile(f64::NAN).is_err());
    }

    #[test]
    fn cp_corners() {
        assert_eq!(clopper_pearson_lower(0, 10, 0.05).unwrap(), 0.0);
        let b = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert!((b - 0.001f64.powf(0.01)).abs() < 1e-9);
        assert!(clopper_pearson_lower(3, 2, 0.05).is_err());
        assert!(clopper_pearson_lower(1, 0, 0.05).is_err());
    }
}
