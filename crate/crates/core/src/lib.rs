//! Search-feedback reinforcement learning for query expansion, at desk scale.
//!
//! A synthetic product catalog and BM25 engine stand in for a production
//! retrieval stack. A small autoregressive policy model is warm-started with
//! supervised traces and then trained with group-relative policy optimization
//! against live retrieval rewards (relevance and recall size, gated on
//! structural validity of the generated output).

pub mod catalog;
pub mod config;
pub mod error;
pub mod eval;
pub mod format;
pub mod policy;
pub mod reward;
pub mod search;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
