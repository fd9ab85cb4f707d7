//! Streaming RNN-Transducer toolkit with four language-model fusion schemes.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod harness;
pub mod lattice;
pub mod lm;
pub mod nn;
pub mod params;
pub mod rnnt;
pub mod tensor;
pub mod wer;

pub use error::{Error, Result};
