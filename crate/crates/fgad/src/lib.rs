//! Few-shot anomaly detection with multi-level fine-grained prompts.
//!
//! The pipeline combines two scoring branches over patch-token features:
//! a vision branch that measures distance to a memory bank of normal patch
//! features, and a prompt branch that scores each token against the text
//! features of multi-level (image / foreground / component) prompt banks
//! built from a structured caption document. Learnable abnormal prompts are
//! fitted to a handful of normal images with hand-derived gradients, regions
//! are matched to prompts by language-guided clustering, and the two branch
//! score maps are fused with a harmonic mean.
//!
//! Everything is deterministic given the configured seeds: the synthetic
//! encoder, prompt construction, training, and evaluation all draw from
//! explicitly derived RNG streams. Externally computed backbone features can
//! be imported bit-exactly through the `FGADFEAT` container in [`encoder`].

pub mod align;
pub mod bundle;
pub mod caption;
pub mod config;
pub mod core;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod mfsc;
pub mod pipeline;
pub mod prompts;
pub mod qformer;
pub mod regions;
pub mod scoring;
pub mod synth;

pub mod error;
pub(crate) mod seeded;

pub use crate::core::{FeatVec, LogitScale, ScoreMap};
pub use crate::error::{Error, Result};
