//! First-order denoised-smoothing baseline: reconstruction MSE plus a
//! stability cross-entropy, trained with full backpropagation through a
//! white-box copy of the classifier. It issues no black-box queries.

use std::time::Instant;

use super::runlog::{RunLog, RunLogRow};
use super::trainer::{batch_noise, TrainReport, TrainSchedule};
use crate::blackbox::WhiteBox;
use crate::data::{epoch_order, minibatches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{soft_cross_entropy, soft_cross_entropy_logit_grad, total_loss, LossWeights};
use crate::models::{RdUnet, RdUnetOutput};
use crate::numerics::{sgd_step, step_decay, Mode, Module, Tensor};

/// Value of the baseline objective on one batch and what its backward pass
/// needs.
pub struct FoDsEval {
    pub mse: f64,
    pub ce: f64,
    pub clean: Vec<Vec<f64>>,
    pub denoised: Vec<Vec<f64>>,
    pub output: RdUnetOutput,
    grad_xhat: Tensor,
}

impl FoDsEval {
    pub fn objective(&self) -> f64 {
        self.mse + self.ce
    }

    /// Gradient of the objective w.r.t. the denoiser output.
    pub fn grad_at_output(&self) -> &Tensor {
        &self.grad_xhat
    }
}

/// Evaluates the per-pixel mean squared error of `D(x*)` against `x` plus
/// `mean_i CE(f(x_i), f(D(x_i*)))`, and its gradient at the denoiser
/// output. The classifier sees the denoised batch clamped to `[0, 1]`,
/// matching what a query would see.
pub fn fo_ds_objective(
    denoiser: &RdUnet,
    wb: &mut WhiteBox,
    x: &Tensor,
    x_star: &Tensor,
    clean: Vec<Vec<f64>>,
    mode: Mode,
) -> Result<FoDsEval> {
    let output = denoiser.forward(x_star, mode)?;
    let x_hat = &output.denoised;
    let b = x.batch() as f64;
    let diff = x_hat.sub(x)?;
    let numel = diff.data().len() as f64;
    let mse = diff.dot(&diff) / numel;
    let clamped = x_hat.clamp(0.0, 1.0);
    let fwd = wb.forward(&clamped)?;
    let mut ce = 0.0;
    let mut grad_logits = fwd.logits.clone();
    let mut denoised = Vec::with_capacity(clean.len());
    for (r, c) in clean.iter().enumerate() {
        let p = fwd.probabilities.item_slice(r);
        ce += soft_cross_entropy(c, p)?;
        for (g, v) in grad_logits
            .item_slice_mut(r)
            .iter_mut()
            .zip(soft_cross_entropy_logit_grad(c, p))
        {
            *g = v / b;
        }
        denoised.push(p.to_vec());
    }
    let g_in = wb.input_gradient(&fwd.cache, &grad_logits)?;
    let mut grad_xhat = diff.scale(2.0 / numel);
    for ((g, gi), v) in grad_xhat.data_mut().iter_mut().zip(g_in.data()).zip(x_hat.data()) {
        if (0.0..=1.0).contains(v) {
            *g += gi;
        }
    }
    Ok(FoDsEval {
        mse,
        ce: ce / b,
        clean,
        denoised,
        output,
        grad_xhat,
    })
}

/// Trains `denoiser` on the baseline objective. The logged `ce`/`cs`/`mmd`
/// columns are the same query-side objective the zeroth-order trainers
/// report, computed here from white-box probabilities; `objective` holds
/// the minimised value.
pub fn train_fo_ds(
    data: &Dataset,
    denoiser: &mut RdUnet,
    wb: &mut WhiteBox,
    weights: &LossWeights,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    let mut problems = Vec::new();
    schedule.validate("schedule", &mut problems);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let start = Instant::now();
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
    let clean_all: Vec<Vec<f64>> = {
        let out = wb.forward(&data.images)?;
        (0..data.len()).map(|i| out.probabilities.item_slice(i).to_vec()).collect()
    };
    let item_shape = data.image_shape();
    'epochs: for epoch in 0..schedule.epochs {
        let lr = step_decay(schedule.learning_rate, epoch, schedule.epochs);
        for batch in minibatches(&epoch_order(data.len(), seed, epoch), schedule.batch_size) {
            let x = data.images.gather(&batch);
            let x_star = x.add(&batch_noise(seed, epoch, &batch, &item_shape, schedule.noise_std)?)?;
            let clean = batch.iter().map(|&i| clean_all[i].clone()).collect();
            let snapshot = denoiser.clone();
            let result = (|| {
                let eval = fo_ds_objective(denoiser, wb, &x, &x_star, clean, Mode::Train)?;
                if !eval.objective().is_finite() {
                    return Err(Error::NonFinite(format!("objective {}", eval.objective())));
                }
                let breakdown = total_loss(&eval.clean, &eval.denoised, weights, schedule.mmd_bandwidth)?;
                denoiser.zero_grad();
                denoiser.backward(&eval.output.cache, &eval.grad_xhat)?;
                sgd_step(denoiser, lr)?;
                denoiser.absorb(&eval.output.cache);
                Ok((eval.objective(), breakdown))
            })();
            match result {
                Ok((objective, b)) => {
                    report.log.rows.push(RunLogRow {
                        step: report.steps,
                        epoch,
                        ce: b.ce,
                        cs: b.cs,
                        mmd: b.mmd,
                        total: b.total,
                        queries_total: 0,
                        wall_ms: if schedule.record_time { start.elapsed().as_millis() as u64 } else { 0 },
                        objective,
                    });
                    report.steps += 1;
                }
                Err(e) if e.is_numerical() => {
                    *denoiser = snapshot;
                    report.halted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}
