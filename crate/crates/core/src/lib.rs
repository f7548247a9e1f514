// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beam;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod features;
pub mod fmcw;
pub mod neural;
pub mod numerics;
pub mod scenario;

pub use error::{Error, Result};
