//! Learning-preference laboratory for causal language models.
//!
//! Builds synthetic biography corpora with controlled knowledge conflicts,
//! trains a tiny decoder-only model on them and measures which side of each
//! conflict the model prefers.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod knowledge;
pub mod lm;
pub mod par;
pub mod recipe;
pub mod scorer;
pub mod seeding;
pub mod templates;
pub mod train;

pub use error::{Error, Result};
