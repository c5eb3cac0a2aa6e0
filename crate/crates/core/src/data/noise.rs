use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// I.i.d. `N(0, sigma²)` entries.
pub fn gaussian_noise(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    Ok(Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    }))
}

/// A clean input, the noise added to it and the resulting perturbed input.
#[derive(Clone, Debug)]
pub struct NoisySample {
    pub x: Tensor,
    pub eta: Tensor,
    pub x_star: Tensor,
    pub sigma: f64,
}

impl NoisySample {
    pub fn draw(x: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let eta = gaussian_noise(x.shape(), sigma, rng)?;
        let x_star = x.add(&eta)?;
        Ok(Self {
            x: x.clone(),
            eta,
            x_star,
            sigma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_gives_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gaussian_noise(&[3, 4], 0.0, &mut rng).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gaussian_noise(&[3], -1.0, &mut rng).is_err());
    }

    #[test]
    fn moments_within_law_of_large_numbers_bounds() {
        let sigma = 0.5;
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t = gaussian_noise(&[n], sigma, &mut rng).unwrap();
        let mean = t.sum() / n as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!((var - sigma * sigma).abs() < 0.01 * sigma * sigma, "var {var}");
    }

    #[test]
    fn fixed_seed_reproducible_and_sample_is_exact_sum() {
        let x = Tensor::full(&[1, 1, 4, 4], 0.3);
        let a = NoisySample::draw(&x, 0.25, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = NoisySample::draw(&x, 0.25, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.x_star, b.x_star);
        assert_eq!(a.x_star, x.add(&a.eta).unwrap());
    }
}
