//! Task-aware batch normalization for multi-domain few-shot learning.

pub mod autodiff;
pub mod coordinator;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod metric;
pub mod normalization;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Result, TanoError};
pub use tensor::Tensor;
