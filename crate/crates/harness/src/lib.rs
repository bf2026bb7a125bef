//! Experiment harness for the Shampoo optimizer: synthetic problems, a
//! deterministic training loop and the experiment suites.

pub mod problems;
pub mod suites;
pub mod trace;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run diverged at step {0}")]
    Diverged(u64),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Diverged(_) => 3,
            HarnessError::Numerical(_) => 4,
            HarnessError::Io(_) => 1,
        }
    }
}

impl From<shampoo::StepError> for HarnessError {
    fn from(e: shampoo::StepError) -> Self {
        match e {
            shampoo::StepError::Config(c) => HarnessError::Config(c.to_string()),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}
