//! Learnable-query aggregation and a small autoregressive caption decoder
//! with greedy and beam-search decoding.

mod decoder;
mod qformer;
mod search;
mod vocab;

pub use decoder::{decoder_logits, register_decoder, DecoderConfig, ModelScorer};
pub use qformer::{qformer_aggregate, register_qformer};
pub use search::{decode_beam, decode_greedy, BeamResult, Hypothesis, StepScorer};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

/// Default number of learnable queries.
pub const DEFAULT_QUERIES: usize = 32;
/// Default caption length limit, counted in emitted tokens.
pub const DEFAULT_MAX_LEN: usize = 15;
pub const DEFAULT_BEAM: usize = 5;
