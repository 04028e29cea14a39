//! Core engine for zero-shot sketch-based image retrieval.
//!
//! Sketch and image features are projected into a shared low-dimensional
//! semantic space by adversarially trained encoder/decoder pairs scored
//! with Wasserstein-style critics, regularised by cycle-consistency,
//! classification, and identity-matching terms. Per-class semantic codes
//! come from text vectors joined with taxonomy similarities and compressed
//! by an auto-encoder. Retrieval ranks gallery images by code-space
//! distance and is scored with mAP and Prec@K.
//!
//! Module map:
//! - [`matrix`], [`nn`]: dense math, MLP forward/backward, RMSprop,
//!   weight clipping.
//! - [`losses`]: every objective term as value plus gradients.
//! - [`semantics`]: taxonomy similarities, text vectors, the code
//!   combiner.
//! - [`data`]: feature files, zero-shot splits, batching, synthetic data.
//! - [`trainer`]: the alternating optimization loop and checkpoints.
//! - [`retrieval`]: ranking, AP/mAP/Prec@K, the 1-D Wasserstein
//!   diagnostic.

pub mod data;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod retrieval;
mod seeding;
pub mod semantics;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use matrix::{Matrix, Real};
