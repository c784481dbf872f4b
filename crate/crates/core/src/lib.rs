pub mod corpus;
pub mod cost;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod experiment;
pub mod generation;
pub mod model;
pub mod nn;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
