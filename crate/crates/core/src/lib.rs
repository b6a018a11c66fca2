//! Dose decision trees fit to doubly robust effect curves.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod dtr;
pub mod effectcurve;
pub mod error;
pub mod kernelsearch;
pub mod nuisance;
pub mod pipeline;
pub mod sim;
pub mod tao;

pub use error::{Error, Result};
