#![no_std]
extern crate alloc;

pub mod ablation;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod kinematics;
pub mod metrics;
pub mod music;
pub mod nn;
pub mod tape;
pub mod tempomoe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
