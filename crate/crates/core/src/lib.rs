//! Ontology-assisted pneumonia screening: a from-scratch separable CNN with
//! its training loop, a PGM/PPM data pipeline, a forward-chaining ontology
//! reasoner for decision fusion, and evaluation reports.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ontology;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use rng::SeededRng;
pub use tensor::{matmul, Scalar, Tensor};
