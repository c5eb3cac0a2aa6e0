use crate::error::{Error, Result};
use crate::numerics::layers::Module;

/// Plain gradient descent: `θ ← θ − lr·g` on every parameter of `module`.
///
/// The whole step is rejected, leaving every parameter untouched, if any
/// gradient entry is non-finite.
pub fn sgd_step(module: &mut dyn Module, learning_rate: f64) -> Result<()> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    let mut bad = None;
    module.visit_params("", &mut |name, p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    module.visit_params("", &mut |_, p| {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= learning_rate * g;
        }
    });
    Ok(())
}

/// Step-decay schedule: the base rate is divided by 10 after one third and
/// again after two thirds of the epochs.
pub fn step_decay(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base;
    }
    let stage = (3 * epoch / total_epochs).min(2);
    base / 10f64.powi(stage as i32)
}
