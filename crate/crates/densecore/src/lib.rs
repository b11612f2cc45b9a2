//! Semi-supervised logistic tensor decomposition for detecting dense
//! relational cores, such as coordinated review-abuse groups, in
//! multi-modal interaction data.
//!
//! The pipeline: ingest sparse binary interaction tuples ([`tensor`]),
//! fit a low-rank logistic decomposition with automatic rank shrinkage
//! and optional partial labels ([`model`], [`infer`]), persist the fit
//! ([`checkpoint`]), then rank entities by abuse probability ([`eval`]).
//! [`synth`] generates planted-core benchmarks.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod objective;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
