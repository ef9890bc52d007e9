//! Hierarchical two-stage text classification for imbalanced label sets.
//!
//! The pipeline merges all non-dominant labels into a single combined class,
//! trains a binary stage that separates the dominant class from the combined
//! one, and trains a second multiclass stage that recovers the original label
//! inside the combined class. Both stages share a byte-level BPE tokenizer
//! and a small transformer encoder trained from scratch; a fixed-length
//! sentiment feature vector is concatenated with the `[CLS]` representation
//! before each classification head.

pub mod commands;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod model;
pub mod sentiment;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
