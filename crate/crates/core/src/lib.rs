pub mod alignmetrics;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
