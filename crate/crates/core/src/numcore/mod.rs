//! Dense `f64` tensors, a reverse-mode tape, AdamW and a finite-difference
//! gradient checker.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{fd_gradcheck, fd_gradcheck_subset, GradReport};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use params::{Bound, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
