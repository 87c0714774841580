pub mod cli;
pub mod corpus;
pub mod encoding;
pub mod error;
pub mod gnn;
pub mod kg;
pub mod kqa;
pub mod metrics;
pub mod model;
pub mod retriever;
pub mod seq;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
