//! Zeroth-order gradient estimation and the training procedures built on
//! it, plus the first-order baseline.

mod chain;
mod estimator;
mod fo_ds;
mod runlog;
mod trainer;

pub use chain::{chain_to_params, WhiteBoxPath};
pub use estimator::{
    cge_estimate, cge_estimate_with_base, estimate_with_base, rge_estimate, rge_estimate_with_base, BatchLoss,
    Directions, Estimator, GradientEstimate, ZoConfig,
};
pub use fo_ds::{fo_ds_objective, train_fo_ds, FoDsEval};
pub use runlog::{RunLog, RunLogRow};
pub use trainer::{batch_noise, train_zo_ae_ruds, train_zo_ruds, TrainReport, TrainSchedule};
