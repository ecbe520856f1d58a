//! Score estimation for SDEs through Malliavin calculus.
//!
//! A forward path is simulated together with its first and second variation processes;
//! from those the Malliavin covariance, covering field and Skorokhod integral are built per
//! path. Minus their conditional expectation given `X_t = y` is the score `∇log p_t(y)`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod error;
pub(crate) mod linalg;
pub mod malliavin;
pub mod model;
pub mod oracle;
pub mod path;
pub mod score;

pub use error::{Error, Result};
pub use model::{BuiltinModel, SdeModel};
pub use path::{BrownianPath, TimeGrid, VariationTrajectory};
