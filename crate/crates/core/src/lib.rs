//! Two-stage triplet training for cross-lingual, duration-based
//! text-to-speech on a synthetic bilingual corpus.
//!
//! Stage I trains the acoustic model together with a content predictor and a
//! speaker predictor. Stage II freezes the predictors and the embedding
//! tables and fine-tunes the acoustic model with a triplet loss computed on
//! cross-lingual syntheses made inside each batch.

// `!(x > 0.0)` is how validation rejects NaN along with bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod corpus;
mod error;
pub mod layout;
pub mod model;
pub mod nn;
pub mod predictors;
pub mod synth;
pub mod trainer;
pub mod triplet;

pub use error::{Error, Result};
pub use ttts_tape::Matrix;
