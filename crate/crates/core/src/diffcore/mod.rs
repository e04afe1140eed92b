//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! The pieces: [`tensor::Tensor`] values, a per-step [`tape::Tape`] that
//! records operations and replays them backward, a persistent
//! [`params::ParamSet`] the tapes bind into, [`optim::AdamW`] for updates,
//! and [`gradcheck`] to validate analytic gradients against central
//! finite differences.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradReport};
pub use optim::{AdamW, LrSchedule};
pub use params::{ParamId, ParamKind, ParamSet, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
