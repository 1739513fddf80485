//! Discourse-level multi-scale prosody modelling for expressive speech.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod model_d;
pub mod model_u;
pub mod nn;
pub mod pipeline;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
