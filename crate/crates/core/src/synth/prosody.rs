//! Speaker f0 statistics and the linear f0 mapping applied to transferred
//! prosody.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, Split};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F0Domain {
    #[default]
    Linear,
    Log,
}

/// Mean and standard deviation of a speaker's phoneme-level f0, in Hz or in
/// log-Hz depending on `domain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerF0Stats {
    pub speaker: String,
    pub mu: f64,
    pub sigma: f64,
    pub domain: F0Domain,
}

impl SpeakerF0Stats {
    pub fn new(speaker: impl Into<String>, mu: f64, sigma: f64) -> Result<Self> {
        let stats = Self {
            speaker: speaker.into(),
            mu,
            sigma,
            domain: F0Domain::Linear,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.mu.is_finite() || !self.sigma.is_finite() {
            return Err(Error::Stats(format!(
                "{}: mu {} sigma {} (sigma must be positive and finite)",
                self.speaker, self.mu, self.sigma
            )));
        }
        Ok(())
    }

    /// Statistics over the training-split f0 values of `speaker`.
    pub fn from_corpus(manifest: &CorpusManifest, speaker: &str, domain: F0Domain) -> Result<Self> {
        let values: Vec<f64> = manifest
            .split(Split::Train)
            .filter(|u| u.speaker == speaker)
            .flat_map(|u| u.f0.iter().copied())
            .map(|f| match domain {
                F0Domain::Linear => f,
                F0Domain::Log => f.ln(),
            })
            .collect();
        if values.len() < 2 {
            return Err(Error::Stats(format!("{speaker}: fewer than two training f0 values")));
        }
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let sigma = (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        let stats = Self {
            speaker: speaker.to_owned(),
            mu,
            sigma,
            domain,
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// Maps f0 from one speaker's distribution onto another's by matching mean
/// and standard deviation: `(f0 - src.mu) / src.sigma * tgt.sigma + tgt.mu`.
///
/// With [`F0Domain::Log`] stats the same affine map is applied to `ln f0`.
pub fn adapt_f0_linear(f0: &[f64], src: &SpeakerF0Stats, tgt: &SpeakerF0Stats) -> Result<Vec<f64>> {
    src.validate()?;
    tgt.validate()?;
    if src.domain != tgt.domain {
        return Err(Error::Stats(format!(
            "cannot map between {:?} and {:?} statistics",
            src.domain, tgt.domain
        )));
    }
    let map = |x: f64| (x - src.mu) / src.sigma * tgt.sigma + tgt.mu;
    Ok(match src.domain {
        F0Domain::Linear => f0.iter().map(|&x| map(x)).collect(),
        F0Domain::Log => f0.iter().map(|&x| map(x.ln()).exp()).collect(),
    })
}

/// Source and target statistics for one transferred f0 sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Adaptation {
    pub source: SpeakerF0Stats,
    pub target: SpeakerF0Stats,
}

impl F0Adaptation {
    pub fn apply(&self, f0: &[f64]) -> Result<Vec<f64>> {
        adapt_f0_linear(f0, &self.source, &self.target)
    }
}
