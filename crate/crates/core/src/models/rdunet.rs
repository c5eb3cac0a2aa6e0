//! Residual UNet denoiser.
//!
//! Feedforward path: one DConv block, then `depth` stages of 2x2 max
//! pooling followed by a DConv block. Feedback path: `depth` fusion stages,
//! each upsampling the feedback map with a stride-2 transposed convolution,
//! concatenating it with the lateral feedforward map of the same resolution
//! and applying a DConv block. A final 1x1 convolution yields the residual
//! `r`, and the denoised image is `x* + (-r)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::join;
use crate::numerics::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, split_channels,
    BatchNorm2d, BnCache, Conv2d, ConvTranspose2d, Mode, Module, Param, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdUnetConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub image_size: usize,
}

impl Default for RdUnetConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            base_channels: 4,
            depth: 2,
            image_size: 16,
        }
    }
}

impl RdUnetConfig {
    pub fn validate(&self, path: &str, problems: &mut Vec<String>) {
        if self.input_channels == 0 {
            problems.push(format!("{path}.input_channels must be positive"));
        }
        if self.base_channels == 0 {
            problems.push(format!("{path}.base_channels must be positive"));
        }
        if self.depth == 0 {
            problems.push(format!("{path}.depth must be positive"));
        }
        let unit = 1usize.checked_shl(self.depth as u32).unwrap_or(usize::MAX);
        if self.image_size == 0 || self.image_size % unit != 0 {
            problems.push(format!(
                "{path}.image_size {} must be divisible by 2^depth = {unit}",
                self.image_size
            ));
        }
    }

    /// Channel width at pyramid level `level` (0 = input resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Two consecutive conv(3x3, pad 1) + batch-norm + ReLU layers.
#[derive(Clone, Debug)]
pub struct DConv {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct DConvCache {
    input: Tensor,
    bn1: BnCache,
    act1: Tensor,
    bn2: BnCache,
    act2: Tensor,
}

impl DConv {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(inputs, outputs, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(outputs),
            conv2: Conv2d::new(outputs, outputs, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(outputs),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, DConvCache)> {
        let c1 = self.conv1.forward(x)?;
        let (b1, bn1) = self.bn1.forward(&c1, mode)?;
        let act1 = relu(&b1);
        let c2 = self.conv2.forward(&act1)?;
        let (b2, bn2) = self.bn2.forward(&c2, mode)?;
        let act2 = relu(&b2);
        Ok((
            act2.clone(),
            DConvCache {
                input: x.clone(),
                bn1,
                act1,
                bn2,
                act2,
            },
        ))
    }

    pub fn absorb(&mut self, cache: &DConvCache) {
        self.bn1.absorb(&cache.bn1);
        self.bn2.absorb(&cache.bn2);
    }

    pub fn backward(&mut self, cache: &DConvCache, grad: &Tensor) -> Result<Tensor> {
        let g = relu_backward(&cache.act2, grad);
        let g = self.bn2.backward(&cache.bn2, &g)?;
        let g = self.conv2.backward(&cache.act1, &g)?;
        let g = relu_backward(&cache.act1, &g);
        let g = self.bn1.backward(&cache.bn1, &g)?;
        self.conv1.backward(&cache.input, &g)
    }
}

impl Module for DConv {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit_state(&join(prefix, "conv1"), f);
        self.bn1.visit_state(&join(prefix, "bn1"), f);
        self.conv2.visit_state(&join(prefix, "conv2"), f);
        self.bn2.visit_state(&join(prefix, "bn2"), f);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_state_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_state_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_state_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_state_mut(&join(prefix, "bn2"), f);
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up: ConvTranspose2d,
    block: DConv,
}

#[derive(Clone, Debug)]
pub struct RdUnet {
    config: RdUnetConfig,
    stem: DConv,
    down: Vec<DConv>,
    up: Vec<UpStage>,
    head: Conv2d,
}

/// Intermediate values of one [`RdUnet::forward`] call.
#[derive(Clone, Debug)]
pub struct RdUnetCache {
    stem: DConvCache,
    pool_argmax: Vec<(Vec<usize>, Vec<usize>)>,
    down: Vec<DConvCache>,
    up_inputs: Vec<Tensor>,
    up: Vec<DConvCache>,
    lateral_channels: Vec<usize>,
    head_input: Tensor,
    /// Spatial extents of every feedforward map, for structural checks.
    pub feedforward_sizes: Vec<usize>,
    /// Spatial extents of every feedback map, in order.
    pub feedback_sizes: Vec<usize>,
}

pub struct RdUnetOutput {
    pub residual: Tensor,
    pub denoised: Tensor,
    pub cache: RdUnetCache,
}

impl RdUnet {
    /// Random Kaiming initialisation; the 1x1 residual head starts at zero so
    /// the untrained denoiser is exactly the identity.
    pub fn new(config: RdUnetConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut problems = Vec::new();
        config.validate("denoiser", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let stem = DConv::new(config.input_channels, config.width(0), rng);
        let down = (1..=config.depth)
            .map(|l| DConv::new(config.width(l - 1), config.width(l), rng))
            .collect();
        let up = (1..=config.depth)
            .rev()
            .map(|l| UpStage {
                up: ConvTranspose2d::new(config.width(l), config.width(l - 1), 2, 2, rng),
                block: DConv::new(2 * config.width(l - 1), config.width(l - 1), rng),
            })
            .collect();
        let mut head = Conv2d::new(config.width(0), config.input_channels, 1, 1, 0, rng);
        head.weight.value.fill(0.0);
        Ok(Self {
            config,
            stem,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &RdUnetConfig {
        &self.config
    }

    /// Re-randomises the residual head so the network is not the identity.
    pub fn randomize_head(&mut self, rng: &mut impl Rng) {
        let c = &self.config;
        self.head = Conv2d::new(c.width(0), c.input_channels, 1, 1, 0, rng);
    }

    /// Zeroes the residual head, making the denoiser the identity map.
    pub fn zero_head(&mut self) {
        self.head.weight.value.fill(0.0);
        self.head.bias.value.fill(0.0);
    }

    pub fn head_bias_grad(&self) -> &Tensor {
        &self.head.bias.grad
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4("rdunet")?;
        let want = [self.config.input_channels, self.config.image_size, self.config.image_size];
        if [c, h, w] != want {
            return Err(Error::shape(
                "rdunet",
                x.shape(),
                &want,
                "input must match (channels, image_size, image_size)",
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x_star: &Tensor, mode: Mode) -> Result<RdUnetOutput> {
        self.check_input(x_star)?;
        let (mut feat, stem) = self.stem.forward(x_star, mode)?;
        let mut feedforward_sizes = vec![feat.shape()[2]];
        let mut laterals = vec![feat.clone()];
        let mut pool_argmax = Vec::with_capacity(self.down.len());
        let mut down = Vec::with_capacity(self.down.len());
        for block in &self.down {
            let in_shape = feat.shape().to_vec();
            let (pooled, arg) = maxpool2(&feat)?;
            pool_argmax.push((arg, in_shape));
            let (out, cache) = block.forward(&pooled, mode)?;
            feedforward_sizes.push(out.shape()[2]);
            down.push(cache);
            feat = out;
            laterals.push(feat.clone());
        }
        laterals.pop();
        let mut up_inputs = Vec::with_capacity(self.up.len());
        let mut up = Vec::with_capacity(self.up.len());
        let mut lateral_channels = Vec::with_capacity(self.up.len());
        let mut feedback_sizes = Vec::with_capacity(self.up.len());
        for stage in &self.up {
            let lateral = laterals.pop().expect("one lateral per stage");
            let upsampled = stage.up.forward(&feat)?;
            up_inputs.push(feat);
            let upc = upsampled.shape()[1];
            lateral_channels.push(upc);
            let fused = concat_channels(&upsampled, &lateral)?;
            let (out, cache) = stage.block.forward(&fused, mode)?;
            feedback_sizes.push(out.shape()[2]);
            up.push(cache);
            feat = out;
        }
        let residual = self.head.forward(&feat)?;
        let denoised = x_star.sub(&residual)?;
        Ok(RdUnetOutput {
            residual,
            denoised,
            cache: RdUnetCache {
                stem,
                pool_argmax,
                down,
                up_inputs,
                up,
                lateral_channels,
                head_input: feat,
                feedforward_sizes,
                feedback_sizes,
            },
        })
    }

    /// Inference-mode forward returning only the denoised image.
    pub fn denoise(&self, x_star: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x_star, Mode::Inference)?.denoised)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn absorb(&mut self, cache: &RdUnetCache) {
        self.stem.absorb(&cache.stem);
        for (block, c) in self.down.iter_mut().zip(&cache.down) {
            block.absorb(c);
        }
        for (stage, c) in self.up.iter_mut().zip(&cache.up) {
            stage.block.absorb(c);
        }
    }

    /// Backpropagates `grad_denoised` (gradient w.r.t. the denoised output)
    /// into the parameter gradients; returns the gradient w.r.t. `x*`.
    pub fn backward(&mut self, cache: &RdUnetCache, grad_denoised: &Tensor) -> Result<Tensor> {
        let grad_residual = grad_denoised.scale(-1.0);
        let mut g = self.head.backward(&cache.head_input, &grad_residual)?;
        let mut lateral_grads = Vec::with_capacity(self.up.len());
        for (i, stage) in self.up.iter_mut().enumerate().rev() {
            let g_fused = stage.block.backward(&cache.up[i], &g)?;
            let (g_up, g_lat) = split_channels(&g_fused, cache.lateral_channels[i])?;
            lateral_grads.push(g_lat);
            g = stage.up.backward(&cache.up_inputs[i], &g_up)?;
        }
        // Feedback stage i consumed the lateral of level depth-1-i; walking
        // the stages backwards collected them finest level first.
        let mut laterals = lateral_grads.into_iter().rev();
        for (l, block) in self.down.iter_mut().enumerate().rev() {
            let g_pooled = block.backward(&cache.down[l], &g)?;
            let (arg, in_shape) = &cache.pool_argmax[l];
            g = maxpool2_backward(arg, in_shape, &g_pooled);
            let lateral = laterals.next().expect("lateral gradient");
            g.axpy(1.0, &lateral)?;
        }
        let mut g_in = self.stem.backward(&cache.stem, &g)?;
        g_in.axpy(1.0, grad_denoised)?;
        Ok(g_in)
    }
}

impl Module for RdUnet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("down{i}")), f);
        }
        for (i, s) in self.up.iter_mut().enumerate() {
            s.up.visit_params(&join(prefix, &format!("up{i}.upsample")), f);
            s.block.visit_params(&join(prefix, &format!("up{i}.block")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit_state(&join(prefix, "stem"), f);
        for (i, b) in self.down.iter().enumerate() {
            b.visit_state(&join(prefix, &format!("down{i}")), f);
        }
        for (i, s) in self.up.iter().enumerate() {
            s.up.visit_state(&join(prefix, &format!("up{i}.upsample")), f);
            s.block.visit_state(&join(prefix, &format!("up{i}.block")), f);
        }
        self.head.visit_state(&join(prefix, "head"), f);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_state_mut(&join(prefix, "stem"), f);
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_state_mut(&join(prefix, &format!("down{i}")), f);
        }
        for (i, s) in self.up.iter_mut().enumerate() {
            s.up.visit_state_mut(&join(prefix, &format!("up{i}.upsample")), f);
            s.block.visit_state_mut(&join(prefix, &format!("up{i}.block")), f);
        }
        self.head.visit_state_mut(&join(prefix, "head"), f);
    }
}
