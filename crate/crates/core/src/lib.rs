pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod seeding;

pub use error::{Error, Result};
