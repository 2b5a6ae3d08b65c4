//! A laboratory for Markov attention heads in decision transformers.

pub mod envsuite;
pub mod evalharness;
pub mod error;
pub mod numkernel;
pub mod markovlab;
pub mod seqmodel;
pub mod trainer;
pub mod weightsio;

pub use error::{Error, Result};
