//! Shampoo: a second-order optimizer with Kronecker-factored
//! preconditioners, inverse p-th roots computed off the critical path and
//! diagonal learning-rate grafting.

pub mod config;
pub mod linalg;
pub mod optimizer;
pub mod partition;
pub mod root;
pub mod scheduler;
pub mod shampoo;
pub mod state;

pub use config::{ConfigError, ShampooConfig};
pub use linalg::{LinalgError, Matrix};
pub use optimizer::{Schedule, StepError};
pub use root::{inverse_pth_root, RootConfig, RootDiagnostics, RootError};
pub use scheduler::{Scheduler, SchedulerMode};
pub use shampoo::{AdaGrad, Adam, Optimizer, SgdMomentum, Shampoo, StepReport};
pub use state::{PreconditionerState, Side};
