//! Domain-invariant prompt tuning for vision-language knowledge distillation.
//!
//! The pipeline has two training stages against a frozen mini vision-language
//! teacher, book-ended by data synthesis and a leave-one-domain-out benchmark:
//!
//! 1. [`data`] generates seeded multi-domain patch datasets and rotation plans.
//! 2. [`teacher`] provides the frozen teacher: tokenizer, text transformer
//!    (accepting token ids or continuous token embeddings), conv image
//!    encoder, and contrastive pretraining.
//! 3. [`prompts`] holds the per-class template bank, the aggregated class
//!    embeddings, and stage 1: per-domain learnable prompt tokens.
//! 4. [`store`] aggregates per-domain class embeddings into domain-invariant
//!    embeddings and persists every embedding matrix with provenance.
//! 5. [`distill`] trains student image models from the teacher's image
//!    encoder and a chosen class-embedding source, and classifies by cosine.
//! 6. [`eval`] computes accuracy/macro-F1 and orchestrates the full rotation
//!    experiment with leakage guards.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nn;
pub mod prompts;
pub mod rng;
pub mod store;
pub mod teacher;

pub use error::{Error, Result};
