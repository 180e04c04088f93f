//! File formats, training loop, evaluation and CLI around `tempomoe-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod generate;
pub mod routing;
pub mod trainer;

pub use error::{AppError, AppResult};
