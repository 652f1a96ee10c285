//! Self-supervised flow matching on procedurally generated token sequences.
//!
//! The crate trains a small velocity-prediction transformer with rectified
//! flow matching, optionally pairing it with an EMA teacher through
//! dual-timestep scheduling so that representation learning happens inside
//! the generative objective. Everything runs in f64 on the CPU and every
//! stochastic path takes an explicit counter-based RNG handle, so runs are
//! reproducible bit for bit.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod dualts;
pub mod error;
pub mod eval;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod schedules;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Philox;
pub use tensor::Tensor;
