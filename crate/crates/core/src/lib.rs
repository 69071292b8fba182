//! Attribute-guided soft prompt tuning against a frozen toy dual encoder.
//!
//! The crate contains a small reverse-mode autodiff tape, a deterministic
//! text/image encoder pair, soft-prompt assembly, attribute sampling by
//! clustering, the classification, regularization and negative-prompt
//! losses, an SGD trainer, and a planted synthetic benchmark whose ground
//! truth makes attribute quality measurable.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribute;
pub mod config;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod numerics;
pub mod prompt;
pub mod synthbench;
pub mod train;

pub use error::{Error, Result};
