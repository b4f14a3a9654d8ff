//! Inference and evaluation: synthesis systems, prosody transfer, proxy
//! metrics and the external transcriber contract.

mod asr;
mod eval;
mod prosody;
mod systems;

pub use asr::{normalize_transcript, word_error_rate, AsrClient, AsrError, JobStatus, ScriptedTranscriber, Transcriber, TranscriberRegistry};
pub use eval::{evaluate, heldout_recon_l1, EvalReport, EvalRow, MetricSummary, TestSet};
pub use prosody::{adapt_f0_linear, F0Adaptation, F0Domain, SpeakerF0Stats};
pub use systems::{
    synthesize, write_synthesis, F0AdaptationMode, ProsodyTransferSpec, SynthContext, SynthMetadata, SynthOutput, SynthPlan, SynthRequest, SynthesisSystem, SystemRegistry,
};
