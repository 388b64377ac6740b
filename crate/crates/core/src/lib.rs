//! Single-token embeddings for idiomatic multi-word expressions.
//!
//! The crate mines example contexts for each expression from a line-oriented
//! corpus, learns one vector per expression from its character n-grams and
//! its contexts by mimicking the embeddings of common words, appends those
//! vectors to a transformer encoder's vocabulary, and trains and scores a
//! siamese sentence-similarity model with Spearman-rank evaluation.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod injection;
pub mod mimic;
pub mod mlm;
pub mod nn;
pub mod pipeline;
pub mod registry;
pub mod sts;
pub mod synth;
pub mod text;
pub mod tokenizer;

pub use error::{Error, Result};
pub use registry::{Language, MweEntry, MweRegistry, TokenId};
pub use tokenizer::{tokenize_with_mwes, Token, WordPiece};
