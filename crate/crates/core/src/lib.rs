//! Detects and explains dataset bias in language-model generations.
//!
//! The pipeline mines counter-example pairs from hidden states, isolates the
//! shared (bias) component of each pair, clusters those vectors, asks a chat
//! model to describe each cluster, and renders debiasing prompts.

pub mod biasrep;
pub mod cale;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod induce;
pub mod pairminer;
pub mod pipeline;
pub mod promptgen;
pub mod registry;
pub mod report;
pub mod selector;
pub mod synth;

pub use error::{Error, Result};
