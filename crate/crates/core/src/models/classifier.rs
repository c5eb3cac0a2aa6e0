//! Small convolutional image classifier used as the target model.
//!
//! Two conv(3x3) + batch-norm + ReLU + max-pool blocks followed by a dense
//! head producing `classes` logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::join;
use crate::numerics::{
    maxpool2, maxpool2_backward, relu, relu_backward, softmax, BatchNorm2d, BnCache, Conv2d, Dense,
    Mode, Module, Param, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub conv_widths: [usize; 2],
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            image_size: 16,
            conv_widths: [8, 16],
            classes: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, path: &str, problems: &mut Vec<String>) {
        if self.input_channels == 0 || self.conv_widths.contains(&0) {
            problems.push(format!("{path}: channel counts must be positive"));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            problems.push(format!(
                "{path}.image_size {} must be a positive multiple of 4",
                self.image_size
            ));
        }
        if self.classes < 2 {
            problems.push(format!("{path}.classes must be at least 2"));
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.image_size, self.image_size]
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct ConvBlockCache {
    input: Tensor,
    bn: BnCache,
    act: Tensor,
    argmax: Vec<usize>,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ConvBlockCache)> {
        let c = self.conv.forward(x)?;
        let (b, bn) = self.bn.forward(&c, mode)?;
        let act = relu(&b);
        let (pooled, argmax) = maxpool2(&act)?;
        Ok((
            pooled,
            ConvBlockCache {
                input: x.clone(),
                bn,
                act,
                argmax,
            },
        ))
    }

    fn backward(&mut self, cache: &ConvBlockCache, grad: &Tensor) -> Result<Tensor> {
        let g = maxpool2_backward(&cache.argmax, cache.act.shape(), grad);
        let g = relu_backward(&cache.act, &g);
        let g = self.bn.backward(&cache.bn, &g)?;
        self.conv.backward(&cache.input, &g)
    }
}

impl Module for ConvBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit_state(&join(prefix, "conv"), f);
        self.bn.visit_state(&join(prefix, "bn"), f);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_state_mut(&join(prefix, "conv"), f);
        self.bn.visit_state_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    block1: ConvBlock,
    block2: ConvBlock,
    head: Dense,
}

#[derive(Clone, Debug)]
pub struct ClassifierCache {
    block1: ConvBlockCache,
    block2: ConvBlockCache,
    pooled_shape: Vec<usize>,
    flat: Tensor,
}

pub struct ClassifierOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub cache: ClassifierCache,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut problems = Vec::new();
        config.validate("classifier", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let [c1, c2] = config.conv_widths;
        let flat = c2 * (config.image_size / 4).pow(2);
        Ok(Self {
            block1: ConvBlock {
                conv: Conv2d::new(config.input_channels, c1, 3, 1, 1, rng),
                bn: BatchNorm2d::new(c1),
            },
            block2: ConvBlock {
                conv: Conv2d::new(c1, c2, 3, 1, 1, rng),
                bn: BatchNorm2d::new(c2),
            },
            head: Dense::new(flat, config.classes, rng),
            config,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Zeroes the dense head (logits become all-zero).
    pub fn zero_head(&mut self) {
        self.head.weight.value.fill(0.0);
        self.head.bias.value.fill(0.0);
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ClassifierOutput> {
        let (n, c, h, w) = x.dims4("classifier")?;
        if [c, h, w] != self.config.input_shape() {
            return Err(Error::shape(
                "classifier",
                x.shape(),
                &self.config.input_shape(),
                "input must match (channels, image_size, image_size)",
            ));
        }
        let (a1, block1) = self.block1.forward(x, mode)?;
        let (a2, block2) = self.block2.forward(&a1, mode)?;
        let pooled_shape = a2.shape().to_vec();
        let flat = a2.reshape(&[n, pooled_shape[1..].iter().product()])?;
        let logits = self.head.forward(&flat)?;
        let probabilities = softmax(&logits)?;
        Ok(ClassifierOutput {
            logits,
            probabilities,
            cache: ClassifierCache {
                block1,
                block2,
                pooled_shape,
                flat,
            },
        })
    }

    pub fn absorb(&mut self, cache: &ClassifierCache) {
        self.block1.bn.absorb(&cache.block1.bn);
        self.block2.bn.absorb(&cache.block2.bn);
    }

    /// Backward from a gradient w.r.t. the logits; returns the input gradient.
    pub fn backward(&mut self, cache: &ClassifierCache, grad_logits: &Tensor) -> Result<Tensor> {
        let g = self.head.backward(&cache.flat, grad_logits)?;
        let g = g.reshape(&cache.pooled_shape)?;
        let g = self.block2.backward(&cache.block2, &g)?;
        self.block1.backward(&cache.block1, &g)
    }
}

impl Module for Classifier {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.block1.visit_params(&join(prefix, "block1"), f);
        self.block2.visit_params(&join(prefix, "block2"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.block1.visit_state(&join(prefix, "block1"), f);
        self.block2.visit_state(&join(prefix, "block2"), f);
        self.head.visit_state(&join(prefix, "head"), f);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.block1.visit_state_mut(&join(prefix, "block1"), f);
        self.block2.visit_state_mut(&join(prefix, "block2"), f);
        self.head.visit_state_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_head_gives_uniform_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ClassifierConfig {
            classes: 4,
            ..Default::default()
        };
        let mut clf = Classifier::new(cfg, &mut rng).unwrap();
        clf.zero_head();
        let x = Tensor::from_fn(&[3, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
        let out = clf.forward(&x, Mode::Inference).unwrap();
        for v in out.probabilities.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_sum_to_one_and_inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clf = Classifier::new(ClassifierConfig::default(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[5, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
        let a = clf.forward(&x, Mode::Inference).unwrap();
        let b = clf.forward(&x, Mode::Inference).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
        for r in 0..5 {
            let s: f64 = a.probabilities.item_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_wrong_input_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clf = Classifier::new(ClassifierConfig::default(), &mut rng).unwrap();
        assert!(clf.forward(&Tensor::zeros(&[1, 3, 16, 16]), Mode::Inference).is_err());
    }
}
