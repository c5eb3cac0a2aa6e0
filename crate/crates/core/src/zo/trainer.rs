//! Zeroth-order training of the denoiser (and encoder) against black-box
//! replies.
//!
//! Everything the trainer learns about the classifier comes from
//! [`BlackBox::query`]; the module never sees a classifier type.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::chain::{chain_to_params, WhiteBoxPath};
use super::estimator::{estimate_with_base, ZoConfig};
use super::runlog::{RunLog, RunLogRow};
use crate::blackbox::{BlackBox, BlackBoxReply, Phase};
use crate::data::seed::{substream, tag};
use crate::data::{epoch_order, gaussian_noise, minibatches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{Bandwidth, BatchObjective, LossWeights};
use crate::models::{Autoencoder, Decoder, RdUnet};
use crate::numerics::{sgd_step, step_decay, Mode, Module, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Standard deviation of the training noise.
    pub noise_std: f64,
    #[serde(default = "default_bandwidth")]
    pub mmd_bandwidth: Bandwidth,
    /// Keep the decoder at its pretrained weights.
    #[serde(default)]
    pub freeze_decoder: bool,
    /// Fill the `wall_ms` log column (otherwise 0, keeping logs
    /// reproducible byte for byte).
    #[serde(default)]
    pub record_time: bool,
}

fn default_bandwidth() -> Bandwidth {
    Bandwidth::Median
}

impl TrainSchedule {
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
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push(format!("{path}.noise_std = {} must be non-negative", self.noise_std));
        }
        if let Bandwidth::Fixed(h) = self.mmd_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                problems.push(format!("{path}.mmd_bandwidth = {h} must be positive"));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: RunLog,
    pub steps: usize,
    /// Set when training stopped on a non-finite value; the models hold
    /// the last finite state.
    pub halted: Option<String>,
    pub reference_queries: u64,
    pub training_queries: u64,
}

/// Clean replies for every training example, fetched once.
fn reference_replies(bb: &BlackBox, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(64) {
        let x = bb.project(&data.images.gather(chunk));
        out.extend(bb.query(Phase::Reference, &x)?.into_iter().map(|r| r.probabilities));
    }
    Ok(out)
}

/// Training noise for a batch: each example's stream depends only on the
/// root seed, the epoch and the example index.
pub fn batch_noise(seed: u64, epoch: usize, batch: &[usize], item_shape: &[usize], sigma: f64) -> Result<Tensor> {
    let items = batch
        .iter()
        .map(|&i| {
            let mut shape = vec![1];
            shape.extend_from_slice(item_shape);
            gaussian_noise(&shape, sigma, &mut substream(seed, &[tag::NOISE, epoch as u64, i as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

struct ZoModels<'a> {
    denoiser: &'a mut RdUnet,
    autoencoder: Option<&'a mut Autoencoder>,
    freeze_decoder: bool,
}

impl ZoModels<'_> {
    fn snapshot(&self) -> (RdUnet, Option<Autoencoder>) {
        (self.denoiser.clone(), self.autoencoder.as_deref().cloned())
    }

    fn restore(&mut self, snap: (RdUnet, Option<Autoencoder>)) {
        *self.denoiser = snap.0;
        if let (Some(ae), Some(s)) = (self.autoencoder.as_deref_mut(), snap.1) {
            *ae = s;
        }
    }
}

/// A reply with a non-finite entry means the pipeline diverged.
fn finite_probabilities(replies: Vec<BlackBoxReply>) -> Result<Vec<Vec<f64>>> {
    replies
        .into_iter()
        .map(|r| {
            if r.probabilities.iter().all(|p| p.is_finite()) {
                Ok(r.probabilities)
            } else {
                Err(Error::NonFinite(format!("black-box reply {:?}", r.probabilities)))
            }
        })
        .collect()
}

/// Maps probe points (rows at the estimation site) to black-box inputs.
fn to_query_input(bb: &BlackBox, decoder: Option<&Decoder>, points: &Tensor) -> Result<Tensor> {
    match decoder {
        None => Ok(bb.project(points)),
        Some(dec) => Ok(bb.project(&dec.decode(points)?)),
    }
}

/// Denoiser-only training with the estimate taken at the denoiser output.
pub fn train_zo_ruds(
    data: &Dataset,
    denoiser: &mut RdUnet,
    bb: &BlackBox,
    weights: &LossWeights,
    zo: &ZoConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    train(
        data,
        ZoModels {
            denoiser,
            autoencoder: None,
            freeze_decoder: true,
        },
        bb,
        weights,
        zo,
        schedule,
        seed,
    )
}

/// Denoiser + encoder training with the estimate taken at the latent code;
/// probes are decoded before querying. The decoder follows a white-box
/// reconstruction loss unless frozen.
pub fn train_zo_ae_ruds(
    data: &Dataset,
    denoiser: &mut RdUnet,
    autoencoder: &mut Autoencoder,
    bb: &BlackBox,
    weights: &LossWeights,
    zo: &ZoConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    train(
        data,
        ZoModels {
            denoiser,
            autoencoder: Some(autoencoder),
            freeze_decoder: schedule.freeze_decoder,
        },
        bb,
        weights,
        zo,
        schedule,
        seed,
    )
}

fn train(
    data: &Dataset,
    mut models: ZoModels<'_>,
    bb: &BlackBox,
    weights: &LossWeights,
    zo: &ZoConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    let mut problems = Vec::new();
    schedule.validate("schedule", &mut problems);
    zo.validate("zo", &mut problems);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let start = Instant::now();
    let before = bb.queries();
    let mut report = TrainReport {
        log: RunLog::default(),
        steps: 0,
        halted: None,
        reference_queries: 0,
        training_queries: 0,
    };
    if schedule.epochs == 0 || data.is_empty() {
        return Ok(report);
    }
    let clean = reference_replies(bb, data)?;
    let item_shape = data.image_shape();

    'epochs: for epoch in 0..schedule.epochs {
        let lr = step_decay(schedule.learning_rate, epoch, schedule.epochs);
        let order = epoch_order(data.len(), seed, epoch);
        for batch in minibatches(&order, schedule.batch_size) {
            let snapshot = models.snapshot();
            match step(&mut models, bb, data, &clean, &batch, epoch, &item_shape, lr, weights, zo, schedule, seed) {
                Ok(breakdown) => {
                    report.log.rows.push(RunLogRow {
                        step: report.steps,
                        epoch,
                        ce: breakdown.ce,
                        cs: breakdown.cs,
                        mmd: breakdown.mmd,
                        total: breakdown.total,
                        queries_total: bb.queries().training - before.training,
                        wall_ms: if schedule.record_time { start.elapsed().as_millis() as u64 } else { 0 },
                        objective: breakdown.total,
                    });
                    report.steps += 1;
                }
                Err(e) if e.is_numerical() => {
                    models.restore(snapshot);
                    log::error!("training halted at step {}: {e}", report.steps);
                    report.halted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let after = bb.queries();
    report.reference_queries = after.reference - before.reference;
    report.training_queries = after.training - before.training;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn step(
    models: &mut ZoModels<'_>,
    bb: &BlackBox,
    data: &Dataset,
    clean: &[Vec<f64>],
    batch: &[usize],
    epoch: usize,
    item_shape: &[usize],
    lr: f64,
    weights: &LossWeights,
    zo: &ZoConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<crate::losses::LossBreakdown> {
    let x = data.images.gather(batch);
    let x_star = x.add(&batch_noise(seed, epoch, batch, item_shape, schedule.noise_std)?)?;
    let out = models.denoiser.forward(&x_star, Mode::Train)?;
    let encoded = match models.autoencoder.as_deref() {
        Some(ae) => Some(ae.encoder.forward(&out.denoised)?),
        None => None,
    };
    let site = match &encoded {
        Some((z, _)) => z.clone(),
        None => out.denoised.clone(),
    };
    let decoder = models.autoencoder.as_deref().map(|ae| &ae.decoder);

    let base_replies = bb.query(Phase::Training, &to_query_input(bb, decoder, &site)?)?;
    let objective = BatchObjective::new(
        batch.iter().map(|&i| clean[i].clone()).collect(),
        finite_probabilities(base_replies)?,
        *weights,
        schedule.mmd_bandwidth,
    )?;
    let breakdown = objective.base();
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {breakdown:?}")));
    }

    let mut grads = Vec::with_capacity(batch.len());
    for (row, &example) in batch.iter().enumerate() {
        let loss = |points: &[Tensor]| -> Result<Vec<f64>> {
            let stacked = Tensor::stack(points)?;
            let replies = finite_probabilities(bb.query(Phase::Training, &to_query_input(bb, decoder, &stacked)?)?)?;
            replies
                .iter()
                .map(|r| Ok(objective.with_reply(row, r)?.total))
                .collect()
        };
        let mut rng = substream(seed, &[tag::DIRECTIONS, epoch as u64, example as u64]);
        let est = estimate_with_base(&loss, &site.item(row), breakdown.total, zo, &mut rng)?;
        grads.push(est.vector);
    }
    let g = Tensor::stack(&grads)?;

    models.denoiser.zero_grad();
    match (models.autoencoder.as_deref_mut(), &encoded) {
        (Some(ae), Some((z, enc_cache))) => {
            ae.encoder.zero_grad();
            chain_to_params(
                WhiteBoxPath::DenoiserEncoder {
                    denoiser: models.denoiser,
                    cache: &out.cache,
                    encoder: &mut ae.encoder,
                    encoder_cache: enc_cache,
                },
                &g,
                &x_star,
            )?;
            sgd_step(&mut ae.encoder, lr)?;
            if !models.freeze_decoder {
                let (y, dec_cache) = ae.decoder.forward(z)?;
                let diff = y.sub(&out.denoised)?;
                let grad = diff.scale(2.0 / diff.numel() as f64);
                ae.decoder.zero_grad();
                ae.decoder.backward(&dec_cache, &grad)?;
                sgd_step(&mut ae.decoder, lr)?;
            }
        }
        _ => {
            chain_to_params(
                WhiteBoxPath::Denoiser {
                    denoiser: models.denoiser,
                    cache: &out.cache,
                },
                &g,
                &x_star,
            )?;
        }
    }
    sgd_step(models.denoiser, lr)?;
    models.denoiser.absorb(&out.cache);
    Ok(breakdown)
}
