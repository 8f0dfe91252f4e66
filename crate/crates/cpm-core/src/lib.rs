//! Corpus-geometry toolkit for task-oriented dialog data.
//!
//! The pipeline turns a raw utterance corpus into a convex polytopic model:
//! utterances become sum-normalized term-frequency vectors, the vectors are
//! projected onto a low-dimensional affine subspace with PCA, and a minimum
//! volume simplex is fitted around the projected points. The simplex vertices
//! act as semantic patterns; every utterance decomposes into a convex
//! combination of them. Downstream modules derive word-word correlation and
//! attention matrices from the fitted vertex matrix.
//!
//! Modules follow the pipeline stages:
//!
//! - [`corpus`]: loading, delexicalization, vocabulary, term-utterance matrix
//! - [`projection`]: PCA basis, affine projection, subspace coordinates
//! - [`mvsa`]: minimum volume simplex fitting and convex decomposition
//! - [`interpret`]: top terms, nearest utterances, mined patterns, intent tables
//! - [`correlation`]: word vectors, correlation matrices, attention export
//! - [`pipeline`]: end-to-end runs with persisted, reproducible artifacts

pub mod corpus;
pub mod correlation;
mod error;
pub mod interpret;
pub mod io;
pub mod mvsa;
pub mod pipeline;
pub mod projection;

pub use error::{CpmError, Result};
