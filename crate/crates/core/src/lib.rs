//! Multi-field tool retrieval.
//!
//! Tool documentation is standardized into four fields, queries are
//! rewritten into aligned tool needs and arguments, each field is scored
//! separately and the scores are combined by a learned linear model with a
//! missing-parameter penalty.

pub mod cache;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod provider;
pub mod retrieval;
pub mod rewriter;
pub mod scorer;
pub mod standardizer;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
