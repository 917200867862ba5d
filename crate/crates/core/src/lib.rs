pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod evalkit;
pub mod light_t;
pub mod llm_stage;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod trainer;
pub mod transformer;
pub mod visual;

pub use error::{Error, Result};
