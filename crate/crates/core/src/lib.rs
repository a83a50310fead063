//! End-to-end CTC phoneme recognizer with a frequency-directional
//! Transformer feature converter.
//!
//! The pipeline: WAV audio -> 40-dim log mel-filterbank features -> CNN
//! front end -> per-frame self-attention across the 40 frequency bins
//! (proposed variant only) -> BiLSTM -> CTC. Decoding runs greedy or prefix
//! beam search with an optional phoneme 3-gram language model for rescoring,
//! and evaluation reports phoneme error rates per language.

pub mod beam;
pub mod ctc;
pub mod error;
pub mod freq;
pub mod lm;
pub mod nn;
pub mod audio;
pub mod tensor;

pub use error::{Error, Result};
