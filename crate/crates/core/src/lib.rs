//! Masked multimodal learning for visuo-tactile insertion.

pub mod checkpoint;
pub mod config;
pub mod env;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod mae;
pub mod model;
pub mod plot;
pub mod policy;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
