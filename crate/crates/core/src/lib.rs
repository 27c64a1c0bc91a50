//! Structure-aware sketch-to-shape retrieval: point-cloud geometry, a cage
//! deformer, fitting-gap computation, a compact point-cloud encoder, triplet
//! training with adaptive margins, retrieval evaluation, and a synthetic
//! dataset generator, behind a deterministic CLI.

pub mod cli;
pub mod datagen;
pub mod deform;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fitgap;
pub mod geometry;
pub mod kdtree;
pub mod training;

pub use error::{Error, Result};
