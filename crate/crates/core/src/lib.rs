//! Conditioned link generation on dynamic graphs: a pair encoder over
//! temporal neighborhoods feeding a causal transformer that reads a graph's
//! own labeled history as context, trained across domains and applied
//! zero-shot with a cached context prefix.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use config::Config;
pub use error::{Error, Result};
pub use graph::{TemporalEdge, TemporalGraph};
pub use model::ClgModel;
pub use tensor::Tensor;
