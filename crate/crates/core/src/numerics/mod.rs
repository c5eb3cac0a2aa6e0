//! Dense `f64` tensors and the layer set used by the denoiser, the
//! autoencoder and the target classifier.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, softmax, split_channels,
    BatchNorm2d, BnCache, Conv2d, ConvTranspose2d, Dense, Mode, Module,
};
pub use optim::{sgd_step, step_decay};
pub use tensor::{Param, Tensor};
