//! The full parameter set: acoustic model plus both predictors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttts_tape::ParamStore;

use crate::acoustic::{AcousticConfig, AcousticModel};
use crate::predictors::{ContentPredictor, PredictorConfig, SpeakerPredictor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub acoustic: AcousticConfig,
    pub predictors: PredictorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.acoustic.validate()?;
        self.predictors.validate()?;
        let (a, p) = (&self.acoustic, &self.predictors);
        if a.n_mels != p.n_mels || a.phoneme_emb_dim != p.phoneme_emb_dim || a.speaker_emb_dim != p.speaker_emb_dim || a.n_speakers != p.n_speakers {
            return Err(Error::Config("acoustic and predictor configs disagree".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub acoustic: AcousticModel,
    pub content: ContentPredictor,
    pub speaker: SpeakerPredictor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            acoustic: AcousticModel::new(config.acoustic.clone())?,
            content: ContentPredictor::new(&config.predictors),
            speaker: SpeakerPredictor::new(&config.predictors),
            config,
        })
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.acoustic.init(&mut store, &mut rng);
        self.content.init(&mut store, &mut rng);
        self.speaker.init(&mut store, &mut rng);
        store
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init_params(0);
        for (name, value) in expected.iter() {
            match store.get(name) {
                Some(v) if v.dim() == value.dim() => {}
                Some(v) => {
                    return Err(Error::Load(format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        v.dim(),
                        value.dim()
                    )))
                }
                None => return Err(Error::Load(format!("missing parameter {name}"))),
            }
        }
        if let Some(extra) = store.names().find(|n| !expected.contains(n)) {
            return Err(Error::Load(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}
