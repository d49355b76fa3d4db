//! Few-shot relational triple extraction with multi-prototype embeddings.
//!
//! The pipeline: a corpus of sentences annotated with a single
//! `<head, relation, tail>` triple each is sampled into N-way-K-shot
//! episodes. A small attention encoder (or a precomputed-embedding file)
//! produces contextual token embeddings, a linear-chain CRF tags head/tail
//! entity spans, and class prototypes built from the support set classify
//! entities and relations by Euclidean distance. A translation-style
//! `|head - tail| W_r` vector ties entity prototypes to the relation
//! prototype, and intra/inter regularizers shape the prototype space.
//!
//! Everything differentiable runs on the reverse-mode tape in [`numerics`],
//! which also ships a finite-difference gradient checker.

pub mod config;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod plot;
pub mod proto;
pub mod train;

pub use error::{ConfigError, DataError, MpeError, NumericError};
