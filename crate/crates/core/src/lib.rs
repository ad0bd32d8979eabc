//! Few-shot table-to-text generation.
//!
//! The pipeline retrieves prototype sentences for a table with a learned
//! scorer, feeds them together with the linearized table to a small
//! encoder-decoder, and injects domain knowledge from an unlabeled corpus by
//! training residual bottleneck adapters to reconstruct sentences whose table
//! entities were masked out. Training runs in separate stages, each with its
//! own freeze policy over the parameter tensors.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
mod layers;
pub mod metrics;
pub mod optim;
pub mod orchestrator;
pub mod prompts;
pub mod selector;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
