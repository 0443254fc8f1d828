//! The trainable autoregressive emulator: configuration, parameters,
//! forward evaluation, reverse-mode gradients and checkpoints.

pub mod backprop;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod params;

pub use backprop::{grad_check, GradCheckEntry, GradCheckReport};
pub use checkpoint::{load_checkpoint, load_checkpoint_with_stats, save_checkpoint, Checkpoint};
pub use config::{Activation, ModelConfig};
pub use model::{forecast_with_precision, Emulator, Precision};
pub use params::{GradientSet, ModelParams, ParamSets, ParamTensor};
