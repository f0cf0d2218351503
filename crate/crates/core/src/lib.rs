//! Desk-scale laboratory for geometry-aware document pre-training.
//!
//! The crate covers the full loop for form-like documents: ingest or
//! synthesize a corpus of text segments with bounding boxes, derive
//! self-supervised geometric labels (pair direction/distance, direction
//! exceptions over pair sets, triplet collinearity), pre-train a small
//! text-layout transformer plus its relation heads on those labels, then
//! fine-tune for semantic entity recognition and father/son link extraction
//! and evaluate with restriction-on-father decoding, geometric-constraint
//! baselines, probing, and few-shot harnesses.

pub mod checks;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
