// Negated comparisons are deliberate: NaN must fail range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod attention;
pub mod budget;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod real;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
