//! Missing-modality-robust multimodal sentiment analysis.
//!
//! The crate bundles a small reverse-mode autodiff engine, data handling,
//! the five canonical missing-data generators, and the CIDer model:
//! word-level self-aligned attention, multimodal composite transformers,
//! two-stage self-distillation and causal debiasing at inference.

pub mod alignment;
pub mod causal;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod graph;
pub mod layers;
pub mod masking;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};
