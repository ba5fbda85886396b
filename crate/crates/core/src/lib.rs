//! Numerical attribute reasoning over knowledge graphs through
//! Relation-Attribute chains.
//!
//! A query `(entity, attribute, ?)` is answered by sampling multi-hop chains
//! that end at the entity, keeping the chains closest to the queried attribute
//! in a Poincaré ball, encoding each chain with a small Transformer conditioned
//! on the source value, and mixing per-chain value projections with learned
//! chain weights.

pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod filter;
pub mod hyperbolic;
pub mod kg;
pub mod model;
pub mod reasoner;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
