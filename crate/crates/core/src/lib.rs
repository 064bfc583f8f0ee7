//! Closed-form linear item-item recommenders: Gram statistics, dense and
//! block-sparse solvers, popularity re-scaling and ranking evaluation.

pub mod cli;
pub mod data;
pub mod eval;
pub mod error;
pub mod gram;
pub mod io;
pub mod matrix;
pub mod solver;
pub mod sparse;
pub mod weighting;

pub use error::{Error, Result};
