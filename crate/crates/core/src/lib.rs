pub mod alignment;
pub mod analysis;
pub mod encoding;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod model;
pub mod relevance;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
