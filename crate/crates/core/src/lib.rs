//! Speech-to-unit translation with multi-token prediction objectives, built on
//! a small reverse-mode autodiff engine.

// `!(x >= 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
