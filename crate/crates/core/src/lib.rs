//! Causal spatio-temporal graph forecasting: a small reverse-mode tensor
//! engine, environment codebooks for temporal distribution shift and
//! Hodge-Laplacian edge convolution for spatial causation.

pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod data;
pub mod deconfounder;
pub mod disentangler;
pub mod edge_features;
pub mod error;
pub mod model;
pub mod probe;
pub mod report;
pub mod tensor;
pub mod topology;
pub mod training;

pub use error::Error;
