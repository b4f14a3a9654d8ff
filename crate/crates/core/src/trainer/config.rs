use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticConfig, DurationDomain};
use crate::acoustic::{LINGUISTIC_TABLE_PREFIX, SPEAKER_TABLE_PREFIX};
use crate::model::ModelConfig;
use crate::predictors::{PredictorConfig, CONTENT_PREFIX, SPEAKER_PREFIX};
use crate::triplet::{PositiveDurations, TripletWeights, DEFAULT_CAP};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Training from scratch with the predictor losses.
    One,
    /// Fine-tuning with the triplet loss under freezing.
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(format!("stage must be 1 or 2, got {other}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

pub fn default_freeze_prefixes() -> Vec<String> {
    [SPEAKER_TABLE_PREFIX, LINGUISTIC_TABLE_PREFIX, CONTENT_PREFIX, SPEAKER_PREFIX]
        .map(String::from)
        .to_vec()
}

/// Everything a training run needs, as a flat key/value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_adv: f64,
    pub alpha: f64,
    pub beta: f64,
    pub fe_enabled: bool,
    /// Parameter-name prefixes frozen in stage II.
    pub freeze_prefixes: Vec<String>,
    pub max_steps: usize,
    /// Steps per window of the stage-II convergence rule.
    pub triplet_window: usize,
    /// Minimum relative improvement of the windowed triplet loss.
    pub triplet_floor: f64,
    pub seed: u64,
    pub duration_domain: DurationDomain,
    /// Raw sums over frames and phonemes instead of means.
    pub strict_raw_sums: bool,
    /// FE stage II counts the triplet term a second time.
    pub literal_fe_triplet: bool,
    pub triplet_positive_durations: PositiveDurations,
    pub triplet_cap: usize,
    /// Synthesize triplet positives with prosody transfer (FE only).
    pub dfe_in_triplets: bool,

    pub phoneme_emb_dim: usize,
    pub speaker_emb_dim: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub postnet_dim: usize,
    pub predictor_dim: usize,
    pub prosody_emb_dim: usize,
    pub f0_bins: usize,
    pub energy_bins: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub reference_dim: usize,
    pub context_dim: usize,
    pub encoding_dim: usize,
    pub adversary_dim: usize,

    /// Corpus directory (command line only).
    pub corpus_dir: PathBuf,
    /// Where checkpoints and loss logs go (command line only).
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::One,
            lr: 1e-4,
            batch_size: 16,
            lambda_adv: 0.025,
            alpha: 1.0,
            beta: 0.02,
            fe_enabled: false,
            freeze_prefixes: default_freeze_prefixes(),
            max_steps: 2000,
            triplet_window: 100,
            triplet_floor: 0.01,
            seed: 0,
            duration_domain: DurationDomain::Log,
            strict_raw_sums: false,
            literal_fe_triplet: false,
            triplet_positive_durations: PositiveDurations::Predicted,
            triplet_cap: DEFAULT_CAP,
            dfe_in_triplets: false,
            phoneme_emb_dim: 32,
            speaker_emb_dim: 16,
            encoder_dim: 64,
            decoder_dim: 64,
            decoder_layers: 1,
            postnet_dim: 32,
            predictor_dim: 32,
            prosody_emb_dim: 8,
            f0_bins: 32,
            energy_bins: 32,
            f0_min_hz: 60.0,
            f0_max_hz: 400.0,
            energy_min: 0.0,
            energy_max: 2.0,
            reference_dim: 32,
            context_dim: 32,
            encoding_dim: 32,
            adversary_dim: 32,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> TripletWeights {
        TripletWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::Config("lambda_adv must be nonnegative".into()));
        }
        self.weights().validate()?;
        if self.stage == Stage::Two && self.freeze_prefixes.is_empty() {
            return Err(Error::Config("stage 2 needs at least one freeze prefix".into()));
        }
        if self.triplet_window == 0 || !(self.triplet_floor >= 0.0) {
            return Err(Error::Config("triplet_window must be positive and triplet_floor nonnegative".into()));
        }
        if self.triplet_cap == 0 {
            return Err(Error::Config("triplet_cap must be at least 1".into()));
        }
        if self.dfe_in_triplets && !self.fe_enabled {
            return Err(Error::Config("dfe_in_triplets needs fe_enabled".into()));
        }
        Ok(())
    }

    /// Model shape for a corpus with the given registries.
    pub fn model_config(&self, n_phonemes: usize, n_speakers: usize, n_mels: usize) -> ModelConfig {
        let mut acoustic = AcousticConfig::new(n_phonemes, n_speakers, n_mels);
        acoustic.phoneme_emb_dim = self.phoneme_emb_dim;
        acoustic.speaker_emb_dim = self.speaker_emb_dim;
        acoustic.encoder_dim = self.encoder_dim;
        acoustic.decoder_dim = self.decoder_dim;
        acoustic.decoder_layers = self.decoder_layers;
        acoustic.postnet_dim = self.postnet_dim;
        acoustic.predictor_dim = self.predictor_dim;
        acoustic.prosody_emb_dim = self.prosody_emb_dim;
        acoustic.fe_enabled = self.fe_enabled;
        acoustic.f0_bins = self.f0_bins;
        acoustic.energy_bins = self.energy_bins;
        acoustic.f0_range_hz = (self.f0_min_hz, self.f0_max_hz);
        acoustic.energy_range = (self.energy_min, self.energy_max);
        acoustic.duration_domain = self.duration_domain;
        ModelConfig {
            acoustic,
            predictors: PredictorConfig {
                n_mels,
                reference_dim: self.reference_dim,
                context_dim: self.context_dim,
                encoding_dim: self.encoding_dim,
                adversary_dim: self.adversary_dim,
                phoneme_emb_dim: self.phoneme_emb_dim,
                speaker_emb_dim: self.speaker_emb_dim,
                n_speakers,
            },
        }
    }
}
