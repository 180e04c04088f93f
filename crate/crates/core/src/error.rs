use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by core operations when an input violates its contract.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("kernel has {kernel} channels but input has {input}")]
    KernelChannels { kernel: usize, input: usize },
    #[error("latent dim {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("non-finite value at frame {frame}, channel {channel}")]
    NonFinite { frame: usize, channel: usize },
    #[error("degenerate 6D rotation at frame {frame}, joint {joint}")]
    DegenerateRotation { frame: usize, joint: usize },
    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("cannot select {k} groups out of {g}")]
    TooFewGroups { k: usize, g: usize },
    #[error("unknown ablation axis `{axis}`; valid axes: {valid}")]
    UnknownAxis { axis: String, valid: String },
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
