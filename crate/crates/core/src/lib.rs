//! Retrieval-enhanced emotional video captioning.
//!
//! The pipeline retrieves related captions for a video, calibrates their
//! subject/predicate/object triplets by entropy ([`fcue`]), mines emotion
//! cues from a fixed dictionary ([`pvea`]), balances factual and emotional
//! evidence with gates and routes ([`dbar`]), and decodes a caption through a
//! learnable-query aggregator and a small transformer decoder
//! ([`generation`]). Everything runs on the in-crate autodiff engine in
//! [`numerics`].

pub mod dbar;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod fcue;
pub mod generation;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod pvea;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
