pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fsq;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, ErrorClass, Result};
