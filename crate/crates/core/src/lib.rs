//! Spoken-language filler modelling toolkit.
//!
//! Trains a compact masked language model from scratch under different
//! filler representation and preprocessing strategies, probes where the model
//! expects fillers, and scores fillers as features for confidence/sentiment
//! regression with paired significance tests.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod stats;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
