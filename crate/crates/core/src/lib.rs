//! Training-free accuracy estimation for small neural architectures.
//!
//! The crate scores randomly initialized networks with zero-cost proxies,
//! evaluates textual proxy formulas over captured layer statistics, and fuses
//! the resulting scores with a random forest that predicts test accuracy.

pub mod arch;
pub mod autograd;
pub mod config;
pub mod dsl;
pub mod ensemble;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod proxy;
pub mod seed;
pub mod table;
pub mod tensor;

pub use autograd::{gradient_check, GradError, Gradients, Tape, Var};
pub use tensor::{ShapeError, Tensor};
