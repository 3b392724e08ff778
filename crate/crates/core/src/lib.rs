//! Discriminative-generative distillation laboratory.

pub mod accountant;
pub mod aggregation;
pub mod discriminative;
pub mod error;
pub mod generator;
pub mod harness;
mod io;
pub mod rng;
pub mod student;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{DgdError, Result};
