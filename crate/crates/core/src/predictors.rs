//! Content predictor (CP) and speaker predictor (SP).
//!
//! Both read mel-spectrograms through the same reference-encoder shape: two
//! width-3 convolutions over frames followed by a GRU whose final state
//! summarizes the input. CP runs it on every phoneme segment, mixes the
//! summaries across phonemes with a bidirectional GRU and reconstructs the
//! linguistic embeddings; SP runs it over the whole utterance and
//! reconstructs the speaker embedding. The hiddens before each final
//! projection are the encodings used by the triplet loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use ttts_tape::{ParamStore, Session, Var};

use crate::layout::{segment_index, PaddedLayout};
use crate::nn::{BiGru, Conv3, Gru, Linear};
use crate::{Error, Matrix, Result};

pub const CONTENT_PREFIX: &str = "cp.";
pub const SPEAKER_PREFIX: &str = "sp.";

/// Guard used for cosine distances between encodings.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub n_mels: usize,
    pub reference_dim: usize,
    pub context_dim: usize,
    pub encoding_dim: usize,
    pub adversary_dim: usize,
    pub phoneme_emb_dim: usize,
    pub speaker_emb_dim: usize,
    pub n_speakers: usize,
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_mels,
            self.reference_dim,
            self.context_dim,
            self.encoding_dim,
            self.adversary_dim,
            self.phoneme_emb_dim,
            self.speaker_emb_dim,
            self.n_speakers,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("predictor dims must be positive".into()));
        }
        if !self.context_dim.is_multiple_of(2) {
            return Err(Error::Config("context_dim must be even (bidirectional)".into()));
        }
        Ok(())
    }
}

/// Convolutions plus GRU; the final state summarizes each input item.
pub struct ReferenceEncoder {
    conv1: Conv3,
    conv2: Conv3,
    rnn: Gru,
}

impl ReferenceEncoder {
    pub fn new(name: &str, n_mels: usize, dim: usize) -> Self {
        Self {
            conv1: Conv3::new(&format!("{name}.conv1"), n_mels, dim),
            conv2: Conv3::new(&format!("{name}.conv2"), dim, dim),
            rnn: Gru::new(&format!("{name}.rnn"), dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.rnn.init(store, rng);
    }

    /// `layout.batch() x dim` summaries; items of length zero get zeros.
    pub fn forward(&self, s: &Session, x: Var, layout: &PaddedLayout) -> Var {
        let mask = layout.mask();
        let h = s.tanh(self.conv1.forward(s, x, layout, &mask));
        let h = s.tanh(self.conv2.forward(s, h, layout, &mask));
        self.rnn.forward(s, h, layout, false).last
    }
}

/// Per-phoneme content encoding, phoneme layout.
pub struct ContentEncoding {
    pub phonemes: PaddedLayout,
    /// Reference-encoder summary of every segment (adversary input).
    pub segments: Var,
    /// Encodings used as `f^C`.
    pub z: Var,
    /// Reconstructed linguistic embeddings.
    pub e_hat: Var,
}

/// One encoding per utterance.
pub struct SpeakerEncoding {
    /// `batch x encoding_dim`, used as `f^S`.
    pub z: Var,
    /// `batch x speaker_emb_dim`.
    pub e_hat: Var,
}

pub struct ContentPredictor {
    reference: ReferenceEncoder,
    context: BiGru,
    encoding: Linear,
    projection: Linear,
    adversary_hidden: Linear,
    adversary_out: Linear,
}

impl ContentPredictor {
    pub fn new(config: &PredictorConfig) -> Self {
        let c = config;
        Self {
            reference: ReferenceEncoder::new("cp.ref", c.n_mels, c.reference_dim),
            context: BiGru::new("cp.context", c.reference_dim, c.context_dim),
            encoding: Linear::new("cp.enc", c.context_dim, c.encoding_dim),
            projection: Linear::new("cp.proj", c.encoding_dim, c.phoneme_emb_dim),
            adversary_hidden: Linear::new("cp.adv.hidden", c.reference_dim, c.adversary_dim),
            adversary_out: Linear::new("cp.adv.out", c.adversary_dim, c.n_speakers),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.reference.init(store, rng);
        self.context.init(store, rng);
        self.encoding.init(store, rng);
        self.projection.init(store, rng);
        self.adversary_hidden.init(store, rng);
        self.adversary_out.init(store, rng);
    }

    /// Encodes the phoneme segments of padded mels `mel` (`frames` layout),
    /// cut according to `durations`.
    pub fn encode(&self, s: &Session, mel: Var, frames: &PaddedLayout, durations: &[Vec<usize>]) -> Result<ContentEncoding> {
        if durations.is_empty() || durations.iter().any(Vec::is_empty) {
            return Err(Error::Input("content encoder needs at least one segment per item".into()));
        }
        if durations.len() != frames.batch() {
            return Err(Error::Alignment("one duration sequence per mel required".into()));
        }
        for (b, d) in durations.iter().enumerate() {
            if d.contains(&0) || d.iter().sum::<usize>() != frames.lengths()[b] {
                return Err(Error::Alignment(format!("item {b}: durations do not partition the mel")));
            }
        }
        let phonemes = PaddedLayout::new(durations.iter().map(Vec::len).collect());
        let (segment_layout, index) = segment_index(&phonemes, frames, durations);
        let segment_frames = s.gather_rows(mel, index);
        let segments = self.reference.forward(s, segment_frames, &segment_layout);
        let mask = phonemes.mask();
        let context = self.context.forward(s, segments, &phonemes);
        let z = s.mask_rows(s.tanh(self.encoding.forward(s, context)), &mask);
        let e_hat = s.mask_rows(self.projection.forward(s, z), &mask);
        Ok(ContentEncoding {
            phonemes,
            segments,
            z,
            e_hat,
        })
    }

    /// Speaker classifier over gradient-reversed segment summaries: mean
    /// cross-entropy over valid phonemes.
    pub fn adversarial_loss(&self, s: &Session, encoding: &ContentEncoding, speakers: &[usize], n_speakers: usize) -> Result<Var> {
        let layout = &encoding.phonemes;
        if speakers.len() != layout.batch() {
            return Err(Error::Input("one speaker per item required".into()));
        }
        if let Some(&bad) = speakers.iter().find(|&&x| x >= n_speakers) {
            return Err(Error::Registry(format!("speaker index {bad} not registered")));
        }
        let rows: Vec<Option<usize>> = (0..layout.rows())
            .filter(|&r| layout.valid(r / layout.batch(), r % layout.batch()))
            .map(Some)
            .collect();
        let targets: Vec<usize> = rows.iter().map(|r| speakers[r.unwrap() % layout.batch()]).collect();
        let count = rows.len();
        let reversed = s.grad_reverse(s.gather_rows(encoding.segments, rows), 1.0);
        let logits = self.classify(s, reversed);
        Ok(s.scale(s.sum(s.softmax_xent(logits, targets)), 1.0 / count as f64))
    }

    /// Classifier logits for (already reversed) segment summaries.
    pub fn classify(&self, s: &Session, segments: Var) -> Var {
        self.adversary_out.forward(s, s.tanh(self.adversary_hidden.forward(s, segments)))
    }
}

pub struct SpeakerPredictor {
    reference: ReferenceEncoder,
    encoding: Linear,
    projection: Linear,
}

impl SpeakerPredictor {
    pub fn new(config: &PredictorConfig) -> Self {
        let c = config;
        Self {
            reference: ReferenceEncoder::new("sp.ref", c.n_mels, c.reference_dim),
            encoding: Linear::new("sp.enc", c.reference_dim, c.encoding_dim),
            projection: Linear::new("sp.proj", c.encoding_dim, c.speaker_emb_dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.reference.init(store, rng);
        self.encoding.init(store, rng);
        self.projection.init(store, rng);
    }

    pub fn encode(&self, s: &Session, mel: Var, frames: &PaddedLayout) -> Result<SpeakerEncoding> {
        if frames.batch() == 0 || frames.lengths().contains(&0) {
            return Err(Error::Input("speaker encoder needs non-empty mels".into()));
        }
        let summary = self.reference.forward(s, mel, frames);
        let z = s.tanh(self.encoding.forward(s, summary));
        let e_hat = self.projection.forward(s, z);
        Ok(SpeakerEncoding { z, e_hat })
    }
}

/// Sum over phonemes and dimensions of the squared reconstruction error,
/// averaged over items. `target` is a constant in phoneme layout.
pub fn linguistic_reconstruction_loss(s: &Session, encoding: &ContentEncoding, target: Var) -> Result<Var> {
    if s.shape(encoding.e_hat) != s.shape(target) {
        return Err(Error::Input(format!(
            "linguistic target shape {:?} vs prediction {:?}",
            s.shape(target),
            s.shape(encoding.e_hat)
        )));
    }
    let diff = s.mask_rows(s.sub(encoding.e_hat, target), &encoding.phonemes.mask());
    Ok(s.scale(s.sum(s.square(diff)), 1.0 / encoding.phonemes.batch() as f64))
}

/// Squared error of the speaker embedding, summed over dimensions and
/// averaged over items.
pub fn speaker_reconstruction_loss(s: &Session, encoding: &SpeakerEncoding, target: Var) -> Result<Var> {
    let shape = s.shape(encoding.e_hat);
    if shape != s.shape(target) {
        return Err(Error::Input(format!(
            "speaker target shape {:?} vs prediction {:?}",
            s.shape(target),
            shape
        )));
    }
    Ok(s.scale(s.sum(s.square(s.sub(encoding.e_hat, target))), 1.0 / shape.0 as f64))
}

/// Plain-value helper: rows of `m` as vectors.
pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}
