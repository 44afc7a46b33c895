//! Out-of-distribution detection for classifiers.
//!
//! A classifier is trained jointly with a small GAN whose samples are pushed
//! towards a uniform softmax; afterwards class-conditional Gaussians are fitted
//! over the classifier logits and several confidence scores are evaluated with
//! threshold and precision-recall metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod datakit;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod posthoc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
