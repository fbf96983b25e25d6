//! Core kernels for multi-stage renal-structure segmentation of CT volumes.
//!
//! The crate is `no_std` (with `alloc`): every routine is a pure function of
//! its inputs. File formats, predictor transports and the CLI live in the
//! `kipa-engine` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod cc3d;
pub mod error;
pub mod loss;
pub mod loss_check;
pub mod metrics;
pub mod postprocess;
pub mod pipeline;
pub mod preprocess;
pub mod volume;

pub use error::{Error, Result};
