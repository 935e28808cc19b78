//! Masked image modeling with a shared context encoder, separate pixel and
//! latent decoders, and an EMA target encoder, plus the evaluation tools used
//! to compare its training modes (linear probing, RankMe).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod patching;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
