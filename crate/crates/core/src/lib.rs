//! Adversarial-training laboratory.
//!
//! Small dense tensors with reverse-mode differentiation ([`autodiff`]),
//! classifiers ([`model`]), losses and divergences ([`losses`]), attacks
//! ([`attacks`]), the AT / TRADES / MART / MART+ / InfoAT trainers
//! ([`train`]), a MINE estimator ([`mine`]) and evaluation diagnostics
//! ([`eval`]).

pub mod attacks;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mine;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
