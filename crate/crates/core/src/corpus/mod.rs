//! Synthetic bilingual multi-speaker corpus.
//!
//! The generator renders mel-spectrograms directly from per-phoneme spectral
//! templates and per-speaker spectral tints, so content and speaker identity
//! are separable by construction. Alignments, durations and phoneme-level
//! prosody come out of the generator exactly; no signal processing or forced
//! alignment is involved.

mod batch;
mod generate;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Matrix, Result};

pub use batch::{load_batch, segment_mel, Batch};
pub use generate::{default_speakers, generate_toy_corpus, GeneratorVoice, SpectralTint, ToyGenerator};
pub use io::{read_mel, write_mel, MEL_MAGIC};

/// Language tag used for phonemes that belong to every language.
pub const SHARED: &str = "shared";

pub const DEFAULT_N_MELS: usize = 80;
pub const FRAME_SHIFT_MS: f64 = 10.0;
pub const FRAME_LENGTH_MS: f64 = 42.7;

/// Frame count of an utterance lasting `seconds`, at the given frame shift.
pub fn frames_for_seconds(seconds: f64, frame_shift_ms: f64) -> usize {
    (seconds * 1000.0 / frame_shift_ms).round() as usize
}

/// Ordered phoneme symbols, each tagged with one language or [`SHARED`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    language_of: BTreeMap<String, String>,
}

impl PhonemeInventory {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self> {
        let mut symbols = Vec::with_capacity(entries.len());
        let mut language_of = BTreeMap::new();
        for (symbol, language) in entries {
            if language_of.insert(symbol.clone(), language).is_some() {
                return Err(Error::Config(format!("duplicate phoneme symbol `{symbol}`")));
            }
            symbols.push(symbol);
        }
        if !language_of.values().any(|l| l == SHARED) {
            return Err(Error::Config("inventory needs at least one shared phoneme".into()));
        }
        Ok(Self {
            symbols,
            language_of,
        })
    }

    /// Two synthetic languages with `private` phonemes each plus `shared`
    /// common symbols, in that order: `l1_*`, `l2_*`, `sh_*`.
    pub fn toy(private: usize, shared: usize) -> Self {
        let mut entries = Vec::new();
        for (prefix, lang) in [("l1", "L1"), ("l2", "L2")] {
            for i in 0..private {
                entries.push((format!("{prefix}_{i:02}"), lang.to_owned()));
            }
        }
        for i in 0..shared {
            entries.push((format!("sh_{i:02}"), SHARED.to_owned()));
        }
        Self::new(entries).expect("toy inventory is well formed")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn language(&self, index: usize) -> Option<&str> {
        self.symbol(index)
            .and_then(|s| self.language_of.get(s))
            .map(String::as_str)
    }

    /// Distinct non-shared language tags, sorted.
    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self
            .language_of
            .values()
            .filter(|l| *l != SHARED)
            .cloned()
            .collect();
        langs.sort();
        langs.dedup();
        langs
    }

    /// Indices usable when speaking `language`: its private phonemes plus the
    /// shared ones.
    pub fn indices_for(&self, language: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.language(i), Some(l) if l == language || l == SHARED))
            .collect()
    }

    /// Language implied by a phoneme sequence: the single language of its
    /// private phonemes. `None` for all-shared or mixed sequences.
    pub fn infer_language(&self, phonemes: &[usize]) -> Option<String> {
        let mut found: Option<&str> = None;
        for &p in phonemes {
            match self.language(p) {
                Some(SHARED) | None => {}
                Some(l) => match found {
                    None => found = Some(l),
                    Some(prev) if prev != l => return None,
                    Some(_) => {}
                },
            }
        }
        found.map(str::to_owned)
    }

    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|s| {
                self.index_of(s)
                    .ok_or_else(|| Error::Input(format!("unknown phoneme symbol `{s}`")))
            })
            .collect()
    }
}

/// A registered speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub tag: String,
    pub language: String,
    pub anchor: bool,
    pub voice: GeneratorVoice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Frames x mel-bins matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Matrix,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.ncols() == 0 || frames.nrows() == 0 {
            return Err(Error::Input(format!(
                "mel must have at least one frame and one bin, got {:?}",
                frames.dim()
            )));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("mel contains non-finite entries".into()));
        }
        Ok(Self {
            frames,
            frame_shift_ms: FRAME_SHIFT_MS,
            frame_length_ms: FRAME_LENGTH_MS,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn seconds(&self) -> f64 {
        self.num_frames() as f64 * self.frame_shift_ms / 1000.0
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub phonemes: Vec<usize>,
    pub language: String,
    pub speaker: String,
    pub mel: MelSpectrogram,
    pub durations: Vec<usize>,
    pub f0: Vec<f64>,
    pub energy: Vec<f64>,
    pub split: Split,
}

impl Utterance {
    pub fn num_phonemes(&self) -> usize {
        self.phonemes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phonemes.len();
        if n == 0 {
            return Err(Error::Input(format!("{}: empty phoneme sequence", self.utt_id)));
        }
        if self.durations.len() != n || self.f0.len() != n || self.energy.len() != n {
            return Err(Error::Alignment(format!(
                "{}: {} phonemes but {} durations, {} f0, {} energy values",
                self.utt_id,
                n,
                self.durations.len(),
                self.f0.len(),
                self.energy.len()
            )));
        }
        if self.durations.contains(&0) {
            return Err(Error::Alignment(format!("{}: zero duration", self.utt_id)));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.mel.num_frames() {
            return Err(Error::Alignment(format!(
                "{}: durations sum to {} but mel has {} frames",
                self.utt_id,
                total,
                self.mel.num_frames()
            )));
        }
        if self.energy.iter().any(|&e| e < 0.0) {
            return Err(Error::Input(format!("{}: negative energy", self.utt_id)));
        }
        Ok(())
    }
}

/// A complete corpus: registries plus every utterance with its features.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub inventory: PhonemeInventory,
    pub speakers: Vec<Speaker>,
    pub anchor_speaker_of: BTreeMap<String, String>,
    pub seed: u64,
    pub n_mels: usize,
    pub noise_std: f64,
    pub utterances: Vec<Utterance>,
}

impl CorpusManifest {
    pub fn speaker_index(&self, tag: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s.tag == tag)
            .ok_or_else(|| Error::Registry(format!("unknown speaker `{tag}`")))
    }

    pub fn speaker(&self, tag: &str) -> Result<&Speaker> {
        self.speaker_index(tag).map(|i| &self.speakers[i])
    }

    pub fn languages(&self) -> Vec<String> {
        self.anchor_speaker_of.keys().cloned().collect()
    }

    pub fn anchor_of(&self, language: &str) -> Result<&str> {
        self.anchor_speaker_of
            .get(language)
            .map(String::as_str)
            .ok_or_else(|| Error::Registry(format!("no anchor speaker for `{language}`")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, utt_id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.utt_id == utt_id)
    }

    /// Mean absolute deviation of the generator's Gaussian noise, the floor
    /// no frame-level reconstruction can beat on average.
    pub fn noise_floor_l1(&self) -> f64 {
        self.noise_std * (2.0 / std::f64::consts::PI).sqrt()
    }

    /// Content hash of the inventory and speaker registry. Checkpoints carry
    /// it so a model is never paired with a corpus it was not built for.
    pub fn registry_hash(&self) -> String {
        let tags: Vec<(&str, &str)> = self
            .speakers
            .iter()
            .map(|s| (s.tag.as_str(), s.language.as_str()))
            .collect();
        let canonical = serde_json::to_vec(&(&self.inventory, &tags, &self.anchor_speaker_of))
            .expect("registry serializes");
        let digest = Sha256::digest(canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every registry and utterance invariant.
    pub fn validate(&self) -> Result<()> {
        let languages = self.inventory.languages();
        for lang in &languages {
            let anchor = self.anchor_of(lang)?;
            let speaker = self.speaker(anchor)?;
            if &speaker.language != lang {
                return Err(Error::Config(format!(
                    "anchor `{anchor}` of `{lang}` is native to `{}`",
                    speaker.language
                )));
            }
        }
        for lang in self.anchor_speaker_of.keys() {
            if !languages.contains(lang) {
                return Err(Error::Config(format!("anchor registered for unknown language `{lang}`")));
            }
        }
        for u in &self.utterances {
            u.validate()?;
            let speaker = self.speaker(&u.speaker)?;
            if !languages.contains(&u.language) {
                return Err(Error::Registry(format!("{}: unknown language `{}`", u.utt_id, u.language)));
            }
            if speaker.language != u.language {
                return Err(Error::Config(format!(
                    "{}: speaker `{}` is not native to `{}`",
                    u.utt_id, u.speaker, u.language
                )));
            }
            if let Some(&bad) = u.phonemes.iter().find(|&&p| p >= self.inventory.len()) {
                return Err(Error::Vocabulary {
                    index: bad,
                    size: self.inventory.len(),
                });
            }
            if u.mel.n_mels() != self.n_mels {
                return Err(Error::Input(format!("{}: mel has {} bins", u.utt_id, u.mel.n_mels())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_inventory_layout() {
        let inv = PhonemeInventory::toy(12, 6);
        assert_eq!(inv.len(), 30);
        assert_eq!(inv.languages(), vec!["L1".to_string(), "L2".to_string()]);
        assert_eq!(inv.indices_for("L1").len(), 18);
        assert_eq!(inv.language(29), Some(SHARED));
        assert_eq!(inv.infer_language(&[0, 26]), Some("L1".into()));
        assert_eq!(inv.infer_language(&[24, 25]), None);
        assert_eq!(inv.infer_language(&[0, 12]), None);
    }

    #[test]
    fn inventory_rejects_duplicates_and_missing_shared() {
        let dup = vec![("a".into(), "L1".into()), ("a".into(), SHARED.into())];
        assert!(matches!(PhonemeInventory::new(dup), Err(Error::Config(_))));
        let none_shared = vec![("a".into(), "L1".into()), ("b".into(), "L2".into())];
        assert!(matches!(PhonemeInventory::new(none_shared), Err(Error::Config(_))));
    }

    #[test]
    fn frame_rate_arithmetic() {
        assert_eq!(frames_for_seconds(1.0, FRAME_SHIFT_MS), 100);
        assert_eq!(frames_for_seconds(2.345, FRAME_SHIFT_MS), 235);
        assert_eq!(frames_for_seconds(0.004, FRAME_SHIFT_MS), 0);
        let mel = MelSpectrogram::new(Matrix::zeros((57, 80))).unwrap();
        assert_eq!(frames_for_seconds(mel.seconds(), mel.frame_shift_ms), 57);
    }

    #[test]
    fn mel_rejects_non_finite() {
        let mut m = Matrix::zeros((2, 3));
        m[[1, 1]] = f64::NAN;
        assert!(matches!(MelSpectrogram::new(m), Err(Error::Numeric(_))));
        assert!(MelSpectrogram::new(Matrix::zeros((0, 3))).is_err());
    }
}
