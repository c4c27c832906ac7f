pub mod checkpoint;
pub mod cli;
pub mod data_engine;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod inference;
pub mod label_engine;
pub mod model;
pub mod numerics;
pub mod tag_decoder;
pub mod text_decoder;
pub mod training;
pub mod transport;
pub mod vocab;

pub use error::{Error, Result};
