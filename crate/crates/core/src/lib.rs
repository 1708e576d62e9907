//! Mixture-of-prompt-experts (MoPE) transformer with block-aware prompt fusion
//! (BAF), trained from scratch on a synthetic cross-modal incongruity task.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: `f64` tensors and a reverse-mode gradient tape.
//! * [`layout`]: packed-sequence spans, attention masks, block partitioning.
//! * [`model`]: the two-stage network, prompt experts, fusion and heads.
//! * [`data`]: synthetic task generator, toy vocabulary, templates, few-shot splits.
//! * [`training`]: AdamW, warmup/decay schedule and the training loop.
//! * [`eval`]: accuracy / precision / recall / F1 and run aggregation.
//! * [`persist`]: run configuration files and binary checkpoints.
//! * [`experiment`]: one complete train/evaluate run from a configuration.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod persist;
mod seed;
pub mod training;

pub use error::{Error, Result};
