//! Contextual sequence-to-sequence decoding of intracortical speech
//! recordings, at desk scale, on synthetic multi-day data.

pub mod attention;
pub mod ctc;
pub mod dataset;
pub mod daycal;
pub mod decode;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod heldout;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rescore;
pub mod scaling;
pub mod seq2seq;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
