//! Online few-shot classification over precomputed vision-language
//! embeddings with dual cross-attention adapters.

pub mod adapters;
pub mod archive;
pub mod episodes;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
