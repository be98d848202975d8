//! Online meta-learning with follow-the-meta-leader and its baselines.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod learners;
pub mod meta_objective;
pub mod models;
pub mod numerics;
pub mod tasks;

pub use error::{Error, Result};
