//! Convolutional encoder/decoder pair mapping images to a `latent_dim`
//! feature vector and back.
//!
//! Encoder: two stride-2 conv(3x3) + ReLU stages, flatten, dense to the
//! latent. Decoder: dense + ReLU, reshape, two stride-2 transposed
//! convolutions (ReLU between them).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::join;
use crate::numerics::{relu, relu_backward, Conv2d, ConvTranspose2d, Dense, Module, Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    /// Channel widths of the two encoder stages (mirrored in the decoder).
    pub widths: [usize; 2],
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            image_size: 16,
            latent_dim: 24,
            widths: [8, 16],
        }
    }
}

impl AeConfig {
    pub fn input_dim(&self) -> usize {
        self.input_channels * self.image_size * self.image_size
    }

    fn bottleneck(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self, path: &str, problems: &mut Vec<String>) {
        if self.input_channels == 0 || self.widths.contains(&0) {
            problems.push(format!("{path}: channel counts must be positive"));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            problems.push(format!(
                "{path}.image_size {} must be a positive multiple of 4",
                self.image_size
            ));
        }
        if self.latent_dim == 0 || self.latent_dim >= self.input_dim() {
            problems.push(format!(
                "{path}.latent_dim {} must satisfy 0 < d_r < d = {}",
                self.latent_dim,
                self.input_dim()
            ));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: AeConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Dense,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    input: Tensor,
    act1: Tensor,
    act2: Tensor,
    flat: Tensor,
}

impl Encoder {
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let (n, c, h, w) = x.dims4("encoder")?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.input_channels, cfg.image_size, cfg.image_size) {
            return Err(Error::shape(
                "encoder",
                x.shape(),
                &[cfg.input_channels, cfg.image_size, cfg.image_size],
                "input must match (channels, image_size, image_size)",
            ));
        }
        let act1 = relu(&self.conv1.forward(x)?);
        let act2 = relu(&self.conv2.forward(&act1)?);
        let flat = act2.clone().reshape(&[n, act2.item_len()])?;
        let z = self.fc.forward(&flat)?;
        Ok((
            z,
            EncoderCache {
                input: x.clone(),
                act1,
                act2,
                flat,
            },
        ))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&mut self, cache: &EncoderCache, grad_z: &Tensor) -> Result<Tensor> {
        let g = self.fc.backward(&cache.flat, grad_z)?;
        let g = g.reshape(cache.act2.shape())?;
        let g = relu_backward(&cache.act2, &g);
        let g = self.conv2.backward(&cache.act1, &g)?;
        let g = relu_backward(&cache.act1, &g);
        self.conv1.backward(&cache.input, &g)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: AeConfig,
    fc: Dense,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    z: Tensor,
    act0: Tensor,
    act1: Tensor,
}

impl Decoder {
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, DecoderCache)> {
        let (n, d) = z.dims2("decoder")?;
        if d != self.config.latent_dim {
            return Err(Error::shape(
                "decoder",
                z.shape(),
                &[self.config.latent_dim],
                format!("latent width {d} != d_r = {}", self.config.latent_dim),
            ));
        }
        let b = self.config.bottleneck();
        let act0 = relu(&self.fc.forward(z)?);
        let grid = act0.clone().reshape(&[n, self.config.widths[1], b, b])?;
        let act1 = relu(&self.up1.forward(&grid)?);
        let out = self.up2.forward(&act1)?;
        Ok((
            out,
            DecoderCache {
                z: z.clone(),
                act0,
                act1,
            },
        ))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward(z)?.0)
    }

    /// Backward pass; returns the gradient with respect to `z`.
    pub fn backward(&mut self, cache: &DecoderCache, grad_out: &Tensor) -> Result<Tensor> {
        let n = cache.z.batch();
        let b = self.config.bottleneck();
        let g = self.up2.backward(&cache.act1, grad_out)?;
        let g = relu_backward(&cache.act1, &g);
        let grid = cache.act0.clone().reshape(&[n, self.config.widths[1], b, b])?;
        let g = self.up1.backward(&grid, &g)?;
        let g = g.reshape(cache.act0.shape())?;
        let g = relu_backward(&cache.act0, &g);
        self.fc.backward(&cache.z, &g)
    }
}

/// Encoder and decoder built from one [`AeConfig`].
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(config: AeConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut problems = Vec::new();
        config.validate("autoencoder", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let [w1, w2] = config.widths;
        let b = config.bottleneck();
        let encoder = Encoder {
            conv1: Conv2d::new(config.input_channels, w1, 3, 2, 1, rng),
            conv2: Conv2d::new(w1, w2, 3, 2, 1, rng),
            fc: Dense::new(w2 * b * b, config.latent_dim, rng),
            config: config.clone(),
        };
        let decoder = Decoder {
            fc: Dense::new(config.latent_dim, w2 * b * b, rng),
            up1: ConvTranspose2d::new(w2, w1, 2, 2, rng),
            up2: ConvTranspose2d::new(w1, config.input_channels, 2, 2, rng),
            config,
        };
        Ok(Self { encoder, decoder })
    }

    pub fn config(&self) -> &AeConfig {
        &self.encoder.config
    }
}

macro_rules! visit_all {
    ($self:ident, $prefix:ident, $f:ident, $method:ident, [$($field:ident),*]) => {
        $( $self.$field.$method(&join($prefix, stringify!($field)), $f); )*
    };
}

impl Module for Encoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_all!(self, prefix, f, visit_params, [conv1, conv2, fc]);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_all!(self, prefix, f, visit_state, [conv1, conv2, fc]);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_all!(self, prefix, f, visit_state_mut, [conv1, conv2, fc]);
    }
}

impl Module for Decoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_all!(self, prefix, f, visit_params, [fc, up1, up2]);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_all!(self, prefix, f, visit_state, [fc, up1, up2]);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_all!(self, prefix, f, visit_state_mut, [fc, up1, up2]);
    }
}

impl Module for Autoencoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_all!(self, prefix, f, visit_params, [encoder, decoder]);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_all!(self, prefix, f, visit_state, [encoder, decoder]);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_all!(self, prefix, f, visit_state_mut, [encoder, decoder]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AeConfig {
            input_channels: 3,
            image_size: 16,
            latent_dim: 48,
            widths: [8, 16],
        };
        let ae = Autoencoder::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
        let z = ae.encoder.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 48]);
        let y = ae.decoder.decode(&z).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn decoder_rejects_wrong_latent_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ae = Autoencoder::new(AeConfig::default(), &mut rng).unwrap();
        let err = ae.decoder.decode(&Tensor::zeros(&[1, 23])).unwrap_err();
        assert!(err.to_string().contains("d_r"));
    }

    #[test]
    fn latent_must_be_smaller_than_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AeConfig {
            input_channels: 1,
            image_size: 4,
            latent_dim: 16,
            widths: [2, 2],
        };
        assert!(Autoencoder::new(cfg, &mut rng).is_err());
    }
}
