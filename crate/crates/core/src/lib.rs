//! Joint pretraining of a text encoder and a knowledge-graph encoder.
//!
//! The text encoder learns masked-token prediction while contrastively
//! aligning pooled entity-mention representations with graph-derived
//! representations of the linked concepts.

pub mod corpus;
pub mod dataset;
pub mod config;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod kg;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
