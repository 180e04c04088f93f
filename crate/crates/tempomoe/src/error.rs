use std::fmt;
use std::path::Path;

use tempomoe_core::Error as CoreError;

/// Exit status 1: bad input, config or file contents.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit status 2: the run itself failed (divergence, output IO).
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Validation,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppError {
    pub class: Class,
    pub message: String,
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self { class: Class::Validation, message: msg.into() }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self { class: Class::Runtime, message: msg.into() }
    }

    /// Unreadable or missing input file.
    pub fn input(path: &Path, e: std::io::Error) -> Self {
        Self::invalid(format!("{}: {e}", path.display()))
    }

    /// Failure writing output.
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::runtime(format!("{}: {e}", path.display()))
    }

    pub fn context(self, path: &Path) -> Self {
        Self { class: self.class, message: format!("{}: {}", path.display(), self.message) }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            Class::Validation => EXIT_VALIDATION,
            Class::Runtime => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for AppError {}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        let class = match e {
            CoreError::Diverged { .. } | CoreError::NonDeterministic { .. } => Class::Runtime,
            _ => Class::Validation,
        };
        Self { class, message: e.to_string() }
    }
}
