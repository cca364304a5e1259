pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod index;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod workflow;

pub use error::{Error, Result};
