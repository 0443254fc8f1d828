//! Curriculum fine-tuning and verification toolkit for autoregressive
//! gridded forecast emulators, with a synthetic two-system toy atmosphere.

// `!(x > 0.0)` deliberately rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod emulator;
pub mod error;
pub mod grid;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sensitivity;
pub mod spectral;
pub mod time;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
