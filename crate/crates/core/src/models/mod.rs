//! Network families: the residual UNet denoiser, the encoder/decoder pair
//! and the target classifier.

mod autoencoder;
mod classifier;
mod rdunet;
pub mod training;

pub use autoencoder::{AeConfig, Autoencoder, Decoder, DecoderCache, Encoder, EncoderCache};
pub use classifier::{Classifier, ClassifierCache, ClassifierConfig, ClassifierOutput};
pub use rdunet::{DConv, DConvCache, RdUnet, RdUnetCache, RdUnetConfig, RdUnetOutput};

use crate::error::Result;
use crate::numerics::Tensor;

/// The white-box preprocessing placed in front of the black box.
#[derive(Clone, Debug)]
pub enum Defense {
    /// No preprocessing (plain randomized smoothing).
    Identity,
    Denoiser(RdUnet),
    DenoiserAe {
        denoiser: RdUnet,
        autoencoder: Autoencoder,
    },
}

impl Defense {
    /// Inference-mode preprocessing of a batch of noisy inputs. The result
    /// still has to be projected into the black box's input range.
    pub fn apply(&self, x_star: &Tensor) -> Result<Tensor> {
        match self {
            Defense::Identity => Ok(x_star.clone()),
            Defense::Denoiser(d) => d.denoise(x_star),
            Defense::DenoiserAe {
                denoiser,
                autoencoder,
            } => {
                let x_hat = denoiser.denoise(x_star)?;
                let z = autoencoder.encoder.encode(&x_hat)?;
                autoencoder.decoder.decode(&z)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Defense::Identity => "identity",
            Defense::Denoiser(_) => "denoiser",
            Defense::DenoiserAe { .. } => "denoiser+autoencoder",
        }
    }
}
