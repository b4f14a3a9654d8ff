//! In-batch triplet construction and the triplet loss.
//!
//! For every batch item spoken by its language's anchor speaker, a speaker
//! of another language is picked from the batch and the item's text is
//! synthesized in that speaker's voice. The synthesis is the positive of
//! two triplets:
//!
//! * content: the anchor's ground-truth phoneme segments against the
//!   synthesized ones, compared phoneme by phoneme through the content
//!   predictor's encoding;
//! * speaker: a ground-truth mel of the positive speaker as anchor and a
//!   ground-truth mel of some other speaker as negative, compared through
//!   the speaker predictor's encoding.
//!
//! Selection ([`plan_triplets`]) is pure index bookkeeping; synthesis and
//! scoring happen in [`triplet_loss_graph`] so gradients reach the acoustic
//! model through the synthesized mel.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ttts_tape::{Session, Var};

use crate::acoustic::{AcousticInputs, Conditioning};
use crate::corpus::{CorpusManifest, Utterance};
use crate::layout::PaddedLayout;
use crate::model::Model;
use crate::predictors::NORM_EPS;
use crate::synth::{F0Adaptation, SpeakerF0Stats};
use crate::{Error, Matrix, Result};

/// Default cap on synthesized positives per batch.
pub const DEFAULT_CAP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TripletWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.02 }
    }
}

impl TripletWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!("triplet weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// `1 - a.b / (|a| |b|)`, with each norm floored at [`NORM_EPS`].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_distance length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    1.0 - dot / (na * nb)
}

/// Number of arguments whose norm falls below [`NORM_EPS`].
pub fn degenerate_norms(a: &[f64], b: &[f64]) -> usize {
    let small = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt() < NORM_EPS;
    usize::from(small(a)) + usize::from(small(b))
}

/// Distances that make up one triplet's contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDistances {
    /// Phoneme-wise content distances between anchor and positive.
    pub content: Vec<f64>,
    pub anchor_positive: f64,
    pub anchor_negative: f64,
}

impl PairDistances {
    pub fn content_term(&self) -> f64 {
        (self.content.iter().sum::<f64>() / self.content.len() as f64).max(0.0)
    }

    pub fn speaker_term(&self) -> f64 {
        (self.anchor_positive - self.anchor_negative).max(0.0)
    }
}

/// Triplet loss from precomputed distances, averaged over pairs; zero for
/// no pairs.
pub fn triplet_loss_from_distances(pairs: &[PairDistances], weights: TripletWeights) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|p| weights.alpha * p.content_term() + weights.beta * p.speaker_term())
        .sum();
    sum / pairs.len() as f64
}

/// Encodings of one content triplet and one speaker triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTriplet {
    pub anchor_content: Vec<Vec<f64>>,
    pub positive_content: Vec<Vec<f64>>,
    pub speaker_anchor: Vec<f64>,
    pub speaker_positive: Vec<f64>,
    pub speaker_negative: Vec<f64>,
}

impl EncodedTriplet {
    pub fn distances(&self) -> Result<PairDistances> {
        if self.anchor_content.len() != self.positive_content.len() {
            return Err(Error::Alignment(format!(
                "content anchor has {} phonemes, positive {}",
                self.anchor_content.len(),
                self.positive_content.len()
            )));
        }
        Ok(PairDistances {
            content: self
                .anchor_content
                .iter()
                .zip(&self.positive_content)
                .map(|(a, p)| cosine_distance(a, p))
                .collect(),
            anchor_positive: cosine_distance(&self.speaker_anchor, &self.speaker_positive),
            anchor_negative: cosine_distance(&self.speaker_anchor, &self.speaker_negative),
        })
    }
}

/// Triplet loss over already-encoded triplets.
pub fn triplet_loss(pairs: &[EncodedTriplet], weights: TripletWeights) -> Result<f64> {
    weights.validate()?;
    let distances = pairs.iter().map(EncodedTriplet::distances).collect::<Result<Vec<_>>>()?;
    Ok(triplet_loss_from_distances(&distances, weights))
}

/// Selection made for one anchor-eligible batch item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletMeta {
    /// Batch position of the item whose text is synthesized.
    pub item: usize,
    pub utt_id: String,
    pub language: String,
    pub anchor_speaker: String,
    pub positive_speaker: String,
    /// Batch position of the ground-truth mel used as speaker anchor.
    pub speaker_anchor_item: usize,
    /// Batch position of the ground-truth mel used as negative.
    pub negative_item: usize,
    pub negative_speaker: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletPlan {
    pub pairs: Vec<TripletMeta>,
    /// Items spoken by their language's anchor speaker.
    pub eligible: usize,
    /// Eligible items left out by the per-batch cap.
    pub capped: usize,
    /// Selected items dropped because a candidate set was empty.
    pub skipped: usize,
}

/// Anchor-eligible positions of `items`, in batch order.
pub fn eligible_items(items: &[&Utterance], manifest: &CorpusManifest) -> Vec<usize> {
    items
        .iter()
        .enumerate()
        .filter(|(_, u)| manifest.anchor_speaker_of.get(&u.language) == Some(&u.speaker))
        .map(|(i, _)| i)
        .collect()
}

/// Chooses the triplets of one batch.
///
/// At most `cap` eligible items are used, taken cyclically starting at
/// `rotation` so that successive batches favour different positions.
pub fn plan_triplets(items: &[&Utterance], manifest: &CorpusManifest, cap: usize, rotation: usize, rng: &mut impl Rng) -> Result<TripletPlan> {
    let eligible = eligible_items(items, manifest);
    let mut plan = TripletPlan {
        eligible: eligible.len(),
        ..TripletPlan::default()
    };
    let chosen: Vec<usize> = if eligible.len() > cap {
        plan.capped = eligible.len() - cap;
        let start = rotation % eligible.len();
        let mut picked: Vec<usize> = (0..cap).map(|k| eligible[(start + k) % eligible.len()]).collect();
        picked.sort_unstable();
        picked
    } else {
        eligible
    };
    let native: Vec<&str> = items
        .iter()
        .map(|u| manifest.speaker(&u.speaker).map(|s| s.language.as_str()))
        .collect::<Result<_>>()?;
    for i in chosen {
        let anchor = items[i];
        let cross: Vec<usize> = (0..items.len())
            .filter(|&j| items[j].language != anchor.language && native[j] != anchor.language)
            .collect();
        let Some(&pick) = cross.choose(rng) else {
            plan.skipped += 1;
            continue;
        };
        let positive = &items[pick].speaker;
        let same: Vec<usize> = (0..items.len()).filter(|&j| &items[j].speaker == positive).collect();
        let other: Vec<usize> = (0..items.len()).filter(|&j| &items[j].speaker != positive).collect();
        let (Some(&speaker_anchor_item), Some(&negative_item)) = (same.choose(rng), other.choose(rng)) else {
            plan.skipped += 1;
            continue;
        };
        plan.pairs.push(TripletMeta {
            item: i,
            utt_id: anchor.utt_id.clone(),
            language: anchor.language.clone(),
            anchor_speaker: anchor.speaker.clone(),
            positive_speaker: positive.clone(),
            speaker_anchor_item,
            negative_item,
            negative_speaker: items[negative_item].speaker.clone(),
        });
    }
    Ok(plan)
}

/// Checks every structural invariant of a planned triplet.
pub fn check_triplet(meta: &TripletMeta, items: &[&Utterance], manifest: &CorpusManifest) -> Result<()> {
    let fail = |what: &str| Err(Error::Input(format!("{}: {what}", meta.utt_id)));
    let item = items.get(meta.item).ok_or_else(|| Error::Input("item out of range".into()))?;
    if manifest.anchor_of(&item.language)? != item.speaker || item.speaker != meta.anchor_speaker {
        return fail("synthesized text is not spoken by its anchor speaker");
    }
    if manifest.speaker(&meta.positive_speaker)?.language == item.language {
        return fail("positive speaker is native to the text language");
    }
    if !items.iter().any(|u| u.speaker == meta.positive_speaker && u.language != item.language) {
        return fail("positive speaker does not occur in the batch");
    }
    match items.get(meta.speaker_anchor_item) {
        Some(u) if u.speaker == meta.positive_speaker => {}
        _ => return fail("speaker anchor is not a mel of the positive speaker"),
    }
    match items.get(meta.negative_item) {
        Some(u) if u.speaker != meta.positive_speaker && u.speaker == meta.negative_speaker => {}
        _ => return fail("negative shares the positive speaker"),
    }
    Ok(())
}

/// Which durations drive the synthesized positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveDurations {
    /// The model's own predictions (free running).
    #[default]
    Predicted,
    /// The anchor utterance's ground-truth durations.
    GroundTruth,
}

pub struct TripletOptions<'a> {
    pub weights: TripletWeights,
    pub durations: PositiveDurations,
    /// When set, positives are synthesized with prosody transfer from the
    /// anchor speaker and these per-speaker f0 statistics.
    pub transfer_stats: Option<&'a BTreeMap<String, SpeakerF0Stats>>,
}

/// Loss-graph nodes and logged values for one batch of triplets.
pub struct TripletTerms {
    /// Mean over pairs of the clamped mean content distance.
    pub content: Var,
    /// Mean over pairs of the clamped speaker distance difference.
    pub speaker: Var,
    /// `alpha * content + beta * speaker`.
    pub total: Var,
    pub distances: Vec<PairDistances>,
    pub degenerate_norms: usize,
}

fn pack_mels(items: &[&Utterance]) -> (PaddedLayout, Matrix) {
    let layout = PaddedLayout::new(items.iter().map(|u| u.mel.num_frames()).collect());
    let mels: Vec<&Matrix> = items.iter().map(|u| &u.mel.frames).collect();
    let packed = layout.pack(&mels);
    (layout, packed)
}

/// Synthesizes the planned positives and builds the triplet loss.
///
/// Returns `None` for an empty plan. The synthesized mels stay live in the
/// graph; ground-truth mels enter as constants.
pub fn triplet_loss_graph(s: &Session, model: &Model, manifest: &CorpusManifest, items: &[&Utterance], plan: &TripletPlan, options: &TripletOptions) -> Result<Option<TripletTerms>> {
    options.weights.validate()?;
    if plan.pairs.is_empty() {
        return Ok(None);
    }
    let degenerate_before = s.degenerate_norms();
    let anchors: Vec<&Utterance> = plan.pairs.iter().map(|p| items[p.item]).collect();
    let phonemes: Vec<Vec<usize>> = anchors.iter().map(|u| u.phonemes.clone()).collect();
    let positive: Vec<usize> = plan
        .pairs
        .iter()
        .map(|p| manifest.speaker_index(&p.positive_speaker))
        .collect::<Result<_>>()?;
    let mut conditioning = Conditioning::uniform(&positive);
    if let Some(stats) = options.transfer_stats {
        let native: Vec<usize> = anchors
            .iter()
            .map(|u| manifest.speaker_index(&u.speaker))
            .collect::<Result<_>>()?;
        conditioning.duration = native.clone();
        conditioning.f0 = native.clone();
        conditioning.energy = native;
        conditioning.f0_adaptation = plan
            .pairs
            .iter()
            .map(|p| {
                let get = |tag: &str| {
                    stats
                        .get(tag)
                        .cloned()
                        .ok_or_else(|| Error::Stats(format!("no f0 statistics for {tag}")))
                };
                Ok(Some(F0Adaptation {
                    source: get(&p.anchor_speaker)?,
                    target: get(&p.positive_speaker)?,
                }))
            })
            .collect::<Result<_>>()?;
    }
    let gt_durations: Vec<Vec<usize>> = anchors.iter().map(|u| u.durations.clone()).collect();
    let synthesized = model.acoustic.forward(
        s,
        &AcousticInputs {
            phonemes: &phonemes,
            conditioning,
            durations: match options.durations {
                PositiveDurations::Predicted => None,
                PositiveDurations::GroundTruth => Some(&gt_durations),
            },
            prosody: None,
        },
    )?;

    // content triplets
    let (anchor_frames, anchor_mel) = pack_mels(&anchors);
    let anchor_content = model.content.encode(s, s.constant(anchor_mel), &anchor_frames, &gt_durations)?;
    let positive_content = model
        .content
        .encode(s, synthesized.mel_post, &synthesized.frames, &synthesized.durations_used)?;
    let layout = &anchor_content.phonemes;
    let valid: Vec<Option<usize>> = (0..layout.rows())
        .filter(|&r| layout.valid(r / layout.batch(), r % layout.batch()))
        .map(Some)
        .collect();
    let mut pool = Matrix::zeros((layout.batch(), valid.len()));
    for (k, r) in valid.iter().enumerate() {
        let b = r.unwrap() % layout.batch();
        pool[[b, k]] = 1.0 / layout.lengths()[b] as f64;
    }
    let phone_distances = s.cosine_distance(
        s.gather_rows(anchor_content.z, valid.clone()),
        s.gather_rows(positive_content.z, valid.clone()),
        NORM_EPS,
    );
    let content_per_pair = s.relu(s.matmul(s.constant(pool), phone_distances));

    // speaker triplets
    let pick = |f: fn(&TripletMeta) -> usize| -> Vec<&Utterance> { plan.pairs.iter().map(|p| items[f(p)]).collect() };
    let (an_frames, an_mel) = pack_mels(&pick(|p| p.speaker_anchor_item));
    let (neg_frames, neg_mel) = pack_mels(&pick(|p| p.negative_item));
    let z_anchor = model.speaker.encode(s, s.constant(an_mel), &an_frames)?.z;
    let z_positive = model.speaker.encode(s, synthesized.mel_post, &synthesized.frames)?.z;
    let z_negative = model.speaker.encode(s, s.constant(neg_mel), &neg_frames)?.z;
    let d_pos = s.cosine_distance(z_anchor, z_positive, NORM_EPS);
    let d_neg = s.cosine_distance(z_anchor, z_negative, NORM_EPS);
    let speaker_per_pair = s.relu(s.sub(d_pos, d_neg));

    let n = plan.pairs.len() as f64;
    let content = s.scale(s.sum(content_per_pair), 1.0 / n);
    let speaker = s.scale(s.sum(speaker_per_pair), 1.0 / n);
    let total = s.add(s.scale(content, options.weights.alpha), s.scale(speaker, options.weights.beta));

    let phone_values = s.value(phone_distances).clone();
    let mut per_pair = vec![Vec::new(); plan.pairs.len()];
    for (k, r) in valid.iter().enumerate() {
        per_pair[r.unwrap() % layout.batch()].push(phone_values[[k, 0]]);
    }
    let (dp, dn) = (s.value(d_pos).clone(), s.value(d_neg).clone());
    let distances = per_pair
        .into_iter()
        .enumerate()
        .map(|(b, content)| PairDistances {
            content,
            anchor_positive: dp[[b, 0]],
            anchor_negative: dn[[b, 0]],
        })
        .collect();
    Ok(Some(TripletTerms {
        content,
        speaker,
        total,
        distances,
        degenerate_norms: s.degenerate_norms() - degenerate_before,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_speakers, generate_toy_corpus, PhonemeInventory};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_distance_reference_values() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(degenerate_norms(&[0.0, 0.0], &[1.0, 0.0]), 1);
    }

    #[test]
    fn empty_pairs_cost_nothing() {
        assert_eq!(triplet_loss_from_distances(&[], TripletWeights::default()), 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let t = EncodedTriplet {
            anchor_content: vec![vec![1.0], vec![1.0]],
            positive_content: vec![vec![1.0]],
            speaker_anchor: vec![1.0],
            speaker_positive: vec![1.0],
            speaker_negative: vec![1.0],
        };
        assert!(matches!(triplet_loss(&[t], TripletWeights::default()), Err(Error::Alignment(_))));
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_monotone(
            content in prop::collection::vec(0.0f64..2.0, 1..10),
            ap in 0.0f64..2.0, an in 0.0f64..2.0,
            bump in 0.0f64..1.0, which in 0usize..10,
        ) {
            let w = TripletWeights::default();
            let base = PairDistances { content: content.clone(), anchor_positive: ap, anchor_negative: an };
            let loss = triplet_loss_from_distances(std::slice::from_ref(&base), w);
            prop_assert!(loss >= 0.0);
            let mut more = base.clone();
            let k = which % content.len();
            more.content[k] += bump;
            prop_assert!(triplet_loss_from_distances(&[more], w) >= loss);
            let mut further = base;
            further.anchor_negative += bump;
            prop_assert!(triplet_loss_from_distances(&[further], w) <= loss);
        }
    }

    #[test]
    fn only_anchor_items_are_eligible_and_cap_rotates() {
        let m = generate_toy_corpus(6, &PhonemeInventory::toy(12, 6), &default_speakers(), 2, 8).unwrap();
        let items: Vec<&Utterance> = m.utterances.iter().take(16).collect();
        let eligible = eligible_items(&items, &m);
        assert!(eligible.iter().all(|&i| items[i].speaker.starts_with("anchor")));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = plan_triplets(&items, &m, 4, 0, &mut rng).unwrap();
        assert!(plan.pairs.len() <= 4);
        assert_eq!(plan.capped, eligible.len().saturating_sub(4));
        let shifted = plan_triplets(&items, &m, 4, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let firsts: Vec<usize> = plan.pairs.iter().map(|p| p.item).collect();
        let seconds: Vec<usize> = shifted.pairs.iter().map(|p| p.item).collect();
        assert_ne!(firsts, seconds);
        for p in plan.pairs.iter().chain(&shifted.pairs) {
            check_triplet(p, &items, &m).unwrap();
        }
    }

    #[test]
    fn monolingual_batch_yields_nothing() {
        let m = generate_toy_corpus(6, &PhonemeInventory::toy(12, 6), &default_speakers(), 2, 8).unwrap();
        let items: Vec<&Utterance> = m.utterances.iter().filter(|u| u.language == "L1").collect();
        let plan = plan_triplets(&items, &m, usize::MAX, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(plan.pairs.is_empty());
        assert_eq!(plan.skipped, plan.eligible);
    }
}
