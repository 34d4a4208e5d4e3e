//! Sequence generation with a per-sample dynamic vocabulary of retrieved
//! entities.
//!
//! A transformer encoder-decoder generates output tokens over its base
//! vocabulary extended, per sample, with one token per external entity. Each
//! entity token's embedding (used both as decoder input row and output
//! projection row) is produced by a jointly trained retriever that encodes
//! the entity description and cross-attends to the generator's input.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod graph;
pub mod optim;
pub mod parallel;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
