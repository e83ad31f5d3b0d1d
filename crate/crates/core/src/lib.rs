//! Learned soft parameter resets for neural networks trained on
//! non-stationary streams.
//!
//! The parameters are assumed to drift towards their initialization along an
//! Ornstein-Uhlenbeck process whose per-step strength `gamma` is fitted online
//! from the incoming data. Learners in [`optim`] use the fitted drift to pull
//! parameters back towards the prior and raise learning rates when the data
//! distribution changes.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod drift;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selfcheck;
pub mod streams;

pub use error::{Error, Result};
