//! Activation-memory laboratory for parameter-efficient fine-tuning.
//!
//! A small reverse-mode autodiff engine records, per primitive, exactly which
//! tensors are retained for the backward pass. On top of it sit a frozen toy
//! decoder, three adapter families (pooled low-rank subspace adapters, LoRA
//! and IA3), a closed-form memory estimator, and a training/sweep harness.

pub mod adapters;
pub mod config;
pub mod error;
pub mod exec;
pub mod harness;
pub mod memory;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
