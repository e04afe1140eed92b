//! Differentiable architecture search for time-series forecasting
//! Transformers.
//!
//! The crate trains a weight-sharing hyper-network whose attention scoring,
//! feed-forward activation, residual-replacing encodings, and hidden-width
//! factor are all softmax-mixed choices, then discretizes it one decision at
//! a time by measuring each operation's contribution to validation loss,
//! and finally retrains the chosen sub-network from scratch.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod gradsuite;
pub mod hypernet;
pub mod metrics;
pub mod nnops;
pub mod rng;
pub mod search;
pub mod searchspace;

pub use error::{Error, Result};
