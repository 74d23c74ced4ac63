// `!(x > 0.0)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod golden;
pub mod model;
pub mod objective;
pub mod router;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
