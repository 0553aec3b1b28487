//! Joint pretraining of an auxiliary masked-LM Transformer and a main
//! Transformer with corrective language modeling and sequence contrastive
//! learning, on a from-scratch f64 reverse-mode autodiff engine.

mod error;

pub mod config;
pub mod corpus;
pub mod corruption;
pub mod dataset;
pub mod encoder;
pub mod objectives;
pub mod probe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
