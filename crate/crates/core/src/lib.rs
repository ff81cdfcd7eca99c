//! Total-variation regularized additive regression over discrete covariate
//! graphs, for concise block-structured summaries of heterogeneous
//! treatment effects.

pub mod admm;
pub mod cells;
pub mod cli;
pub mod error;
pub mod operators;
pub mod path;
pub mod reprocess;
pub mod report;
pub mod schema;
pub mod screening;
pub mod simulate;
pub mod weights;

pub use error::{Error, Result};
