//! White-box fitting of the target classifier and autoencoder pretraining.
//! Neither touches a black box.

use serde::{Deserialize, Serialize};

use super::{Autoencoder, Classifier};
use crate::data::seed::{derive_seed, tag};
use crate::data::{epoch_order, minibatches, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, step_decay, Mode, Module, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl FitOptions {
    pub fn validate(&self, path: &str, problems: &mut Vec<String>) {
        if self.batch_size < 2 {
            problems.push(format!(
                "{path}.batch_size = {} must be at least 2 (batch normalisation)",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("{path}.learning_rate = {} must be positive", self.learning_rate));
        }
    }
}

/// Trains `classifier` with hard-label cross-entropy; returns the mean
/// training loss of every epoch.
pub fn train_classifier(
    classifier: &mut Classifier,
    data: &Dataset,
    opts: &FitOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("classifier training needs at least 2 examples".into()));
    }
    let classes = classifier.config().classes;
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = step_decay(opts.learning_rate, epoch, opts.epochs);
        let order = epoch_order(data.len(), derive_seed(seed, &[tag::TARGET_TRAIN]), epoch);
        let mut total = 0.0;
        for batch in minibatches(&order, opts.batch_size) {
            let x = data.images.gather(&batch);
            let out = classifier.forward(&x, Mode::Train)?;
            classifier.absorb(&out.cache);
            let b = batch.len() as f64;
            let mut grad = out.probabilities.clone();
            for (r, &i) in batch.iter().enumerate() {
                let label = data.labels[i];
                let p = out.probabilities.item_slice(r)[label].max(1e-12);
                total -= p.ln();
                grad.item_slice_mut(r)[label] -= 1.0;
            }
            let grad = grad.scale(1.0 / b);
            debug_assert_eq!(grad.shape()[1], classes);
            classifier.zero_grad();
            classifier.backward(&out.cache, &grad)?;
            sgd_step(classifier, lr)?;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

/// Fraction of examples whose inference-mode prediction matches the label.
pub fn accuracy(classifier: &Classifier, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(64) {
        let out = classifier.forward(&data.images.gather(chunk), Mode::Inference)?;
        for (r, &i) in chunk.iter().enumerate() {
            if crate::blackbox::argmax(out.probabilities.item_slice(r)) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains the autoencoder to reconstruct clean images (per-pixel MSE);
/// returns the mean loss of every epoch.
pub fn pretrain_autoencoder(
    ae: &mut Autoencoder,
    data: &Dataset,
    opts: &FitOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = step_decay(opts.learning_rate, epoch, opts.epochs);
        let order = epoch_order(data.len(), derive_seed(seed, &[tag::AE_PRETRAIN]), epoch);
        let mut total = 0.0;
        for batch in minibatches(&order, opts.batch_size) {
            let x = data.images.gather(&batch);
            let (z, enc_cache) = ae.encoder.forward(&x)?;
            let (y, dec_cache) = ae.decoder.forward(&z)?;
            let diff = y.sub(&x)?;
            let scale = 1.0 / diff.numel() as f64;
            total += diff.dot(&diff) * scale * batch.len() as f64;
            let grad = diff.scale(2.0 * scale);
            ae.zero_grad();
            let gz = ae.decoder.backward(&dec_cache, &grad)?;
            ae.encoder.backward(&enc_cache, &gz)?;
            sgd_step(ae, lr)?;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

/// Per-pixel reconstruction MSE of `ae` on `data`.
pub fn reconstruction_mse(ae: &Autoencoder, data: &Dataset) -> Result<f64> {
    let y = ae.decoder.decode(&ae.encoder.encode(&data.images)?)?;
    let d: Tensor = y.sub(&data.images)?;
    Ok(d.dot(&d) / d.numel() as f64)
}
