use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ttts_tape::{ParamStore, Session};

use super::prosody::{F0Adaptation, F0Domain, SpeakerF0Stats};
use crate::acoustic::{AcousticInputs, AcousticOutputs, Conditioning};
use crate::corpus::{write_mel, CorpusManifest, MelSpectrogram};
use crate::model::Model;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F0AdaptationMode {
    None,
    #[default]
    Linear,
}

/// Inference-time prosody transfer from a native anchor speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyTransferSpec {
    pub anchor_speaker: String,
    pub transfer_duration: bool,
    pub transfer_f0: bool,
    pub transfer_energy: bool,
    pub f0_adaptation: F0AdaptationMode,
}

impl ProsodyTransferSpec {
    /// All three transfers with linear f0 adaptation.
    pub fn full(anchor_speaker: impl Into<String>) -> Self {
        Self {
            anchor_speaker: anchor_speaker.into(),
            transfer_duration: true,
            transfer_f0: true,
            transfer_energy: true,
            f0_adaptation: F0AdaptationMode::Linear,
        }
    }

    pub fn validate(&self, manifest: &CorpusManifest, text_language: &str) -> Result<()> {
        let anchor = manifest.speaker(&self.anchor_speaker)?;
        if anchor.language != text_language {
            return Err(Error::Config(format!(
                "transfer anchor {} is native to {}, not to the text language {text_language}",
                anchor.tag, anchor.language
            )));
        }
        if !(self.transfer_duration || self.transfer_f0 || self.transfer_energy) {
            return Err(Error::Config("prosody transfer with nothing to transfer".into()));
        }
        Ok(())
    }

    /// Conditioning for synthesizing `target` with this transfer.
    pub fn conditioning(&self, ctx: &SynthContext, target: &str) -> Result<Conditioning> {
        let t = ctx.manifest.speaker_index(target)?;
        let a = ctx.manifest.speaker_index(&self.anchor_speaker)?;
        let pick = |on: bool| vec![if on { a } else { t }];
        let f0_adaptation = match (self.transfer_f0, self.f0_adaptation) {
            (true, F0AdaptationMode::Linear) => Some(F0Adaptation {
                source: ctx.f0_stats(&self.anchor_speaker)?.clone(),
                target: ctx.f0_stats(target)?.clone(),
            }),
            _ => None,
        };
        Ok(Conditioning {
            decoder: vec![t],
            duration: pick(self.transfer_duration),
            f0: pick(self.transfer_f0),
            energy: pick(self.transfer_energy),
            f0_adaptation: vec![f0_adaptation],
        })
    }
}

/// A trained model plus the registries and statistics it was built with.
pub struct SynthContext<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub manifest: &'a CorpusManifest,
    f0_stats: BTreeMap<String, SpeakerF0Stats>,
}

impl<'a> SynthContext<'a> {
    /// F0 statistics come from the training split, in `domain`.
    pub fn new(model: &'a Model, params: &'a ParamStore, manifest: &'a CorpusManifest, domain: F0Domain) -> Result<Self> {
        model.check_params(params)?;
        let mut f0_stats = BTreeMap::new();
        if model.config.acoustic.fe_enabled {
            for sp in &manifest.speakers {
                f0_stats.insert(sp.tag.clone(), SpeakerF0Stats::from_corpus(manifest, &sp.tag, domain)?);
            }
        }
        Ok(Self {
            model,
            params,
            manifest,
            f0_stats,
        })
    }

    pub fn f0_stats(&self, speaker: &str) -> Result<&SpeakerF0Stats> {
        self.f0_stats
            .get(speaker)
            .ok_or_else(|| Error::Stats(format!("no f0 statistics for {speaker}")))
    }

    pub fn fe_enabled(&self) -> bool {
        self.model.config.acoustic.fe_enabled
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRequest {
    pub phonemes: Vec<usize>,
    pub speaker: String,
}

/// How a system conditions the acoustic model for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPlan {
    pub conditioning: Conditioning,
    pub transfer: Option<ProsodyTransferSpec>,
}

/// One synthesis configuration, selected by name.
pub trait SynthesisSystem: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the checkpoint must carry f0/energy predictors.
    fn requires_fe(&self) -> bool;

    fn plan(&self, ctx: &SynthContext, request: &SynthRequest) -> Result<SynthPlan>;
}

fn plain_plan(ctx: &SynthContext, request: &SynthRequest) -> Result<SynthPlan> {
    let speaker = ctx.manifest.speaker_index(&request.speaker)?;
    Ok(SynthPlan {
        conditioning: Conditioning::uniform(&[speaker]),
        transfer: None,
    })
}

struct Base;

impl SynthesisSystem for Base {
    fn name(&self) -> &'static str {
        "base"
    }

    fn requires_fe(&self) -> bool {
        false
    }

    fn plan(&self, ctx: &SynthContext, request: &SynthRequest) -> Result<SynthPlan> {
        if ctx.fe_enabled() {
            return Err(Error::Unsupported("`base` expects a checkpoint without f0/energy predictors; use `base_fe`".into()));
        }
        plain_plan(ctx, request)
    }
}

struct BaseFe;

impl SynthesisSystem for BaseFe {
    fn name(&self) -> &'static str {
        "base_fe"
    }

    fn requires_fe(&self) -> bool {
        true
    }

    fn plan(&self, ctx: &SynthContext, request: &SynthRequest) -> Result<SynthPlan> {
        plain_plan(ctx, request)
    }
}

struct BaseFeDfe;

impl SynthesisSystem for BaseFeDfe {
    fn name(&self) -> &'static str {
        "base_fe_dfe"
    }

    fn requires_fe(&self) -> bool {
        true
    }

    fn plan(&self, ctx: &SynthContext, request: &SynthRequest) -> Result<SynthPlan> {
        let text_language = ctx
            .manifest
            .inventory
            .infer_language(&request.phonemes)
            .ok_or_else(|| Error::Input("cannot tell the language of a text without language-specific phonemes".into()))?;
        let speaker = ctx.manifest.speaker(&request.speaker)?;
        if speaker.language == text_language {
            return Err(Error::Unsupported(format!(
                "prosody transfer applies to cross-lingual requests only; {} is native to {text_language}",
                speaker.tag
            )));
        }
        let transfer = ProsodyTransferSpec::full(ctx.manifest.anchor_of(&text_language)?);
        transfer.validate(ctx.manifest, &text_language)?;
        Ok(SynthPlan {
            conditioning: transfer.conditioning(ctx, &request.speaker)?,
            transfer: Some(transfer),
        })
    }
}

/// Synthesis systems by name.
pub struct SystemRegistry {
    systems: BTreeMap<&'static str, Box<dyn SynthesisSystem>>,
}

impl Default for SystemRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Base));
        r.register(Box::new(BaseFe));
        r.register(Box::new(BaseFeDfe));
        r
    }
}

impl SystemRegistry {
    pub fn empty() -> Self {
        Self {
            systems: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, system: Box<dyn SynthesisSystem>) {
        self.systems.insert(system.name(), system);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SynthesisSystem> {
        self.systems.get(name).map(Box::as_ref).ok_or_else(|| {
            Error::Registry(format!(
                "unknown synthesis system `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.systems.keys().copied().collect()
    }

    /// The plain system matching a checkpoint variant.
    pub fn default_for(&self, fe_enabled: bool) -> Result<&dyn SynthesisSystem> {
        self.get(if fe_enabled { "base_fe" } else { "base" })
    }
}

/// Everything recorded next to a synthesized mel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub system: String,
    pub speaker: String,
    pub text_language: Option<String>,
    pub phonemes: Vec<String>,
    pub durations: Vec<usize>,
    pub frames: usize,
    pub f0: Option<Vec<f64>>,
    pub energy: Option<Vec<f64>>,
    pub transfer: Option<ProsodyTransferSpec>,
}

pub struct SynthOutput {
    pub mel: MelSpectrogram,
    pub metadata: SynthMetadata,
    pub trace: crate::acoustic::ConditioningTrace,
}

/// Free-running synthesis of one request.
pub fn synthesize(ctx: &SynthContext, system: &dyn SynthesisSystem, request: &SynthRequest) -> Result<SynthOutput> {
    if system.requires_fe() && !ctx.fe_enabled() {
        return Err(Error::Unsupported(format!("`{}` needs a checkpoint trained with f0/energy predictors", system.name())));
    }
    let plan = system.plan(ctx, request)?;
    let s = Session::inference(ctx.params);
    let phonemes = [request.phonemes.clone()];
    let out: AcousticOutputs = ctx.model.acoustic.forward(
        &s,
        &AcousticInputs {
            phonemes: &phonemes,
            conditioning: plan.conditioning,
            durations: None,
            prosody: None,
        },
    )?;
    let mel = MelSpectrogram::new(s.value(out.mel_post).clone())?;
    let inventory = &ctx.manifest.inventory;
    let metadata = SynthMetadata {
        system: system.name().to_owned(),
        speaker: request.speaker.clone(),
        text_language: inventory.infer_language(&request.phonemes),
        phonemes: request
            .phonemes
            .iter()
            .map(|&p| inventory.symbol(p).unwrap_or("?").to_owned())
            .collect(),
        durations: out.durations_used[0].clone(),
        frames: mel.num_frames(),
        f0: out.f0_used.map(|mut v| v.swap_remove(0)),
        energy: out.energy_used.map(|mut v| v.swap_remove(0)),
        transfer: plan.transfer,
    };
    Ok(SynthOutput {
        mel,
        metadata,
        trace: out.trace,
    })
}

/// Writes the mel and, next to it, a `.json` metadata record.
pub fn write_synthesis(output: &SynthOutput, mel_path: &Path) -> Result<()> {
    write_mel(mel_path, &output.mel)?;
    let meta = serde_json::to_vec_pretty(&output.metadata)?;
    std::fs::write(mel_path.with_extension("json"), meta)?;
    Ok(())
}
