//! Inductive identity and position embeddings learned from random-walk
//! statistics alone, with a clustering/classification evaluation harness.

pub mod error;
pub mod eval;
pub mod graph;
pub mod identity;
pub mod infer;
pub mod model;
pub mod nn;
pub mod position;
pub mod train;
pub mod rng;
pub mod run;
pub mod synthetic;
pub mod walk;

pub use error::{IrweError, Result};
