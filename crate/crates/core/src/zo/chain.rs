//! Seeding reverse mode through the white-box part of the pipeline with a
//! gradient estimated at the black-box boundary.

use crate::error::{Error, Result};
use crate::models::{Encoder, EncoderCache, RdUnet, RdUnetCache};
use crate::numerics::Tensor;

/// The differentiable stages between the noisy input and the point where
/// the zeroth-order estimate lives.
pub enum WhiteBoxPath<'a> {
    /// Estimate at the denoiser output.
    Denoiser {
        denoiser: &'a mut RdUnet,
        cache: &'a RdUnetCache,
    },
    /// Estimate at the latent code `z = E(D(x*))`.
    DenoiserEncoder {
        denoiser: &'a mut RdUnet,
        cache: &'a RdUnetCache,
        encoder: &'a mut Encoder,
        encoder_cache: &'a EncoderCache,
    },
}

/// Accumulates `Jᵀ g` into the parameter gradients of every stage on the
/// path and returns the gradient with respect to `x_star`.
pub fn chain_to_params(path: WhiteBoxPath<'_>, g: &Tensor, x_star: &Tensor) -> Result<Tensor> {
    match path {
        WhiteBoxPath::Denoiser { denoiser, cache } => {
            g.expect_same_shape("chain_to_params", x_star)?;
            denoiser.backward(cache, g)
        }
        WhiteBoxPath::DenoiserEncoder {
            denoiser,
            cache,
            encoder,
            encoder_cache,
        } => {
            let want = [x_star.batch(), encoder.latent_dim()];
            if g.shape() != want {
                return Err(Error::shape(
                    "chain_to_params",
                    g.shape(),
                    &want,
                    "latent gradient must be (batch, d_r)",
                ));
            }
            let g_xhat = encoder.backward(encoder_cache, g)?;
            denoiser.backward(cache, &g_xhat)
        }
    }
}
