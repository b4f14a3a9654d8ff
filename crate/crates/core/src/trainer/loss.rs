use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttts_tape::{Session, Var};

use super::config::{Stage, TrainConfig};
use crate::acoustic::{duration_target, AcousticInputs, AcousticOutputs, Conditioning, Prosody};
use crate::corpus::{Batch, CorpusManifest};
use crate::model::Model;
use crate::predictors::{linguistic_reconstruction_loss, speaker_reconstruction_loss};
use crate::synth::SpeakerF0Stats;
use crate::triplet::{plan_triplets, triplet_loss_graph, TripletMeta, TripletOptions};
use crate::{Error, Matrix, Result};

/// Triplet selection and its loss values, logged with every stage-II step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    #[serde(flatten)]
    pub meta: TripletMeta,
    pub content: f64,
    pub speaker: f64,
}

/// Scalar loss terms of one step. Terms that do not apply to the stage or
/// model variant are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: Stage,
    pub recon: f64,
    pub dur: f64,
    pub res: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_ling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_spk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_content: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_speaker: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triplets: Vec<TripletRecord>,
    #[serde(default)]
    pub triplets_skipped: usize,
    #[serde(default)]
    pub degenerate_norms: usize,
    pub total: f64,
}

/// Weights that turn a [`LossReport`]'s terms into its total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub alpha: f64,
    pub beta: f64,
    pub literal_fe_triplet: bool,
}

impl LossWeights {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            lambda_adv: c.lambda_adv,
            alpha: c.alpha,
            beta: c.beta,
            literal_fe_triplet: c.literal_fe_triplet,
        }
    }

    fn triplet_repeats(&self, fe: bool) -> f64 {
        if fe && self.literal_fe_triplet {
            2.0
        } else {
            1.0
        }
    }
}

impl LossReport {
    /// The weighted triplet term, if any triplet was scored.
    pub fn triplet(&self, weights: &LossWeights) -> Option<f64> {
        match (self.triplet_content, self.triplet_speaker) {
            (Some(c), Some(s)) => Some(weights.alpha * c + weights.beta * s),
            _ => None,
        }
    }

    /// Total recomputed from the individual terms.
    pub fn combine(&self, weights: &LossWeights) -> f64 {
        let opt = |x: Option<f64>| x.unwrap_or(0.0);
        self.recon
            + self.dur
            + self.res
            + opt(self.recon_ling)
            + opt(self.recon_spk)
            + weights.lambda_adv * opt(self.adv)
            + opt(self.f0)
            + opt(self.energy)
            + weights.triplet_repeats(self.f0.is_some()) * opt(self.triplet(weights))
    }
}

/// Graph nodes of each term; the graph total is assembled from exactly
/// these so it matches [`LossReport::combine`].
#[derive(Clone, Copy, Debug, Default)]
pub struct TermVars {
    pub recon: Option<Var>,
    pub dur: Option<Var>,
    pub res: Option<Var>,
    pub recon_ling: Option<Var>,
    pub recon_spk: Option<Var>,
    pub adv: Option<Var>,
    pub f0: Option<Var>,
    pub energy: Option<Var>,
    pub triplet_content: Option<Var>,
    pub triplet_speaker: Option<Var>,
}

/// `sum of terms + lambda * adv + repeats * (alpha * content + beta * speaker)`.
pub fn weighted_total(s: &Session, t: &TermVars, w: &LossWeights) -> Var {
    let mut parts: Vec<Var> = [t.recon, t.dur, t.res, t.recon_ling, t.recon_spk, t.f0, t.energy]
        .into_iter()
        .flatten()
        .collect();
    if let Some(adv) = t.adv {
        parts.push(s.scale(adv, w.lambda_adv));
    }
    if let (Some(c), Some(sp)) = (t.triplet_content, t.triplet_speaker) {
        let triplet = s.add(s.scale(c, w.alpha), s.scale(sp, w.beta));
        parts.push(s.scale(triplet, w.triplet_repeats(t.f0.is_some())));
    }
    parts
        .into_iter()
        .reduce(|a, b| s.add(a, b))
        .unwrap_or_else(|| s.scalar_constant(0.0))
}

/// Reduction over padded rows: mean over valid entries, or a raw sum.
fn reduce(s: &Session, elementwise: Var, valid_entries: usize, strict: bool) -> Var {
    let total = s.sum(elementwise);
    if strict {
        total
    } else {
        s.scale(total, 1.0 / valid_entries.max(1) as f64)
    }
}

/// Masked absolute error against a constant target.
pub fn l1_loss(s: &Session, prediction: Var, target: &Matrix, mask: &Matrix, strict: bool) -> Var {
    let valid = mask.sum() as usize * target.ncols();
    let diff = s.mask_rows(s.sub(prediction, s.constant(target.clone())), mask);
    reduce(s, s.abs(diff), valid, strict)
}

/// Masked squared error against a constant target.
pub fn squared_loss(s: &Session, prediction: Var, target: &Matrix, mask: &Matrix, strict: bool) -> Var {
    let valid = mask.sum() as usize * target.ncols();
    let diff = s.mask_rows(s.sub(prediction, s.constant(target.clone())), mask);
    reduce(s, s.square(diff), valid, strict)
}

fn batch_prosody(batch: &Batch) -> Prosody {
    Prosody {
        f0: batch.items.iter().map(|u| u.f0.clone()).collect(),
        energy: batch.items.iter().map(|u| u.energy.clone()).collect(),
    }
}

/// Teacher-forced forward pass on a batch and the acoustic loss terms.
pub fn acoustic_terms(s: &Session, model: &Model, batch: &Batch, speakers: &[usize], strict: bool) -> Result<(AcousticOutputs, TermVars)> {
    let phonemes = batch.phoneme_sequences();
    let durations = batch.durations();
    let fe = model.config.acoustic.fe_enabled;
    let prosody = fe.then(|| batch_prosody(batch));
    let out = model.acoustic.forward(
        s,
        &AcousticInputs {
            phonemes: &phonemes,
            conditioning: Conditioning::uniform(speakers),
            durations: Some(&durations),
            prosody: prosody.as_ref(),
        },
    )?;
    let frame_mask = out.frames.mask();
    let phone_mask = out.phonemes.mask();
    let domain = model.config.acoustic.duration_domain;
    let dur_target: Vec<Vec<f64>> = durations
        .iter()
        .map(|d| d.iter().map(|&x| duration_target(x, domain)).collect())
        .collect();
    let views: Vec<&[f64]> = dur_target.iter().map(Vec::as_slice).collect();
    let dur_target = out.phonemes.pack_values(&views);
    let mut terms = TermVars {
        recon: Some(l1_loss(s, out.mel_pre, &batch.mel, &frame_mask, strict)),
        res: Some(l1_loss(s, out.mel_post, &batch.mel, &frame_mask, strict)),
        dur: Some(squared_loss(s, out.durations_pred, &dur_target, &phone_mask, strict)),
        ..TermVars::default()
    };
    if let (Some(prosody), Some(f0), Some(energy)) = (&prosody, out.f0_pred, out.energy_pred) {
        let (f0_target, energy_target) = model.acoustic.prosody_targets(&out.phonemes, prosody);
        terms.f0 = Some(squared_loss(s, f0, &f0_target, &phone_mask, strict));
        terms.energy = Some(squared_loss(s, energy, &energy_target, &phone_mask, strict));
    }
    Ok((out, terms))
}

fn value(s: &Session, v: Option<Var>) -> Option<f64> {
    v.map(|v| s.scalar(v))
}

fn report(s: &Session, step: usize, stage: Stage, t: &TermVars, total: Var) -> Result<LossReport> {
    let r = LossReport {
        step,
        stage,
        recon: value(s, t.recon).unwrap_or(0.0),
        dur: value(s, t.dur).unwrap_or(0.0),
        res: value(s, t.res).unwrap_or(0.0),
        recon_ling: value(s, t.recon_ling),
        recon_spk: value(s, t.recon_spk),
        adv: value(s, t.adv),
        f0: value(s, t.f0),
        energy: value(s, t.energy),
        triplet_content: value(s, t.triplet_content),
        triplet_speaker: value(s, t.triplet_speaker),
        triplets: Vec::new(),
        triplets_skipped: 0,
        degenerate_norms: 0,
        total: s.scalar(total),
    };
    if !r.total.is_finite() {
        return Err(Error::Numeric(format!("step {step}: non-finite loss {r:?}")));
    }
    Ok(r)
}

/// Stage-I objective: acoustic terms, predictor reconstructions and the
/// speaker-adversarial term.
pub fn stage1_loss(s: &Session, model: &Model, manifest: &CorpusManifest, batch: &Batch, config: &TrainConfig, step: usize) -> Result<(Var, LossReport)> {
    let speakers = batch.speaker_indices(manifest)?;
    let strict = config.strict_raw_sums;
    let (_, mut terms) = acoustic_terms(s, model, batch, &speakers, strict)?;
    let mel = s.constant(batch.mel.clone());
    let durations = batch.durations();
    let content = model.content.encode(s, mel, &batch.frames, &durations)?;
    let ling_target = model.acoustic.linguistic.lookup_detached(s, &batch.phoneme_index());
    terms.recon_ling = Some(linguistic_reconstruction_loss(s, &content, ling_target)?);
    terms.adv = Some(model.content.adversarial_loss(s, &content, &speakers, model.config.acoustic.n_speakers)?);
    let speaker = model.speaker.encode(s, mel, &batch.frames)?;
    let spk_index: Vec<Option<usize>> = speakers.iter().map(|&i| Some(i)).collect();
    let spk_target = model.acoustic.speakers.lookup_detached(s, &spk_index);
    terms.recon_spk = Some(speaker_reconstruction_loss(s, &speaker, spk_target)?);
    let total = weighted_total(s, &terms, &LossWeights::from_config(config));
    Ok((total, report(s, step, Stage::One, &terms, total)?))
}

/// Stage-II objective: acoustic terms plus the triplet loss over the
/// batch's planned triplets.
pub fn stage2_loss(s: &Session, model: &Model, manifest: &CorpusManifest, batch: &Batch, config: &TrainConfig, step: usize, f0_stats: Option<&BTreeMap<String, SpeakerF0Stats>>) -> Result<(Var, LossReport)> {
    let speakers = batch.speaker_indices(manifest)?;
    let (_, mut terms) = acoustic_terms(s, model, batch, &speakers, config.strict_raw_sums)?;
    let mut rng = ChaCha8Rng::seed_from_u64(triplet_seed(config.seed, step));
    let plan = plan_triplets(&batch.items, manifest, config.triplet_cap, step * config.triplet_cap, &mut rng)?;
    let options = TripletOptions {
        weights: config.weights(),
        durations: config.triplet_positive_durations,
        transfer_stats: if config.dfe_in_triplets { f0_stats } else { None },
    };
    let triplets = triplet_loss_graph(s, model, manifest, &batch.items, &plan, &options)?;
    let mut degenerate = 0;
    if let Some(t) = &triplets {
        terms.triplet_content = Some(t.content);
        terms.triplet_speaker = Some(t.speaker);
        degenerate = t.degenerate_norms;
    }
    let total = weighted_total(s, &terms, &LossWeights::from_config(config));
    let mut r = report(s, step, Stage::Two, &terms, total)?;
    r.triplets_skipped = plan.skipped;
    r.degenerate_norms = degenerate;
    if let Some(t) = triplets {
        r.triplets = plan
            .pairs
            .into_iter()
            .zip(t.distances)
            .map(|(meta, d)| TripletRecord {
                content: d.content_term(),
                speaker: d.speaker_term(),
                meta,
            })
            .collect();
    }
    Ok((total, r))
}

/// Seed of the batch drawn at `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Seed of the triplet selection at `step`.
pub fn triplet_seed(seed: u64, step: usize) -> u64 {
    batch_seed(seed, step) ^ 0x5851_F42D_4C95_7F2D
}
