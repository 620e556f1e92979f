//! Verbalized probabilistic graphical modeling.
//!
//! A latent-variable DAG whose conditional dependencies are written in natural
//! language and evaluated by an LLM: the library encodes the graph, renders
//! discovery and inference prompts, samples the model, aggregates the sampled
//! predictions into a categorical distribution, refines it with a
//! Dirichlet-conjugate posterior whose concentration is fitted by minimizing a
//! differentiable calibration loss, and scores the result with calibration
//! metrics.

mod numeric;

pub mod calibrate;
pub mod engine;
pub mod gateway;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod prompt;

pub use graph::{PgmStructure, ValidationOptions, ValidationResult, VarId};
