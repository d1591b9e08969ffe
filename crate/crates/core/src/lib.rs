pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod reporting;
pub mod splitter;
pub mod synthetic;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
