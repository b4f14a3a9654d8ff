//! Objective proxy metrics on the held-out split.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttts_tape::Session;

use super::asr::AsrClient;
use super::systems::{synthesize, SynthContext, SynthRequest, SynthesisSystem};
use crate::acoustic::{AcousticInputs, Conditioning, Prosody};
use crate::corpus::{Split, Utterance};
use crate::layout::PaddedLayout;
use crate::triplet::cosine_distance;
use crate::{Error, Matrix, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSet {
    /// Anchor-speaker texts voiced by speakers of the other language.
    InterLan,
    /// Every text voiced by its own speaker.
    IntraLan,
}

impl FromStr for TestSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter_lan" => Ok(TestSet::InterLan),
            "intra_lan" => Ok(TestSet::IntraLan),
            other => Err(Error::Config(format!("unknown test set `{other}` (inter_lan | intra_lan)"))),
        }
    }
}

impl fmt::Display for TestSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestSet::InterLan => "inter_lan",
            TestSet::IntraLan => "intra_lan",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub utt_id: String,
    pub text_language: String,
    pub target_speaker: String,
    /// Ground-truth utterance of the target speaker used for similarity.
    pub reference_utt: String,
    /// Teacher-forced L1 of the text's own utterance.
    pub mel_l1: f64,
    pub content_distance: f64,
    pub speaker_similarity: f64,
    pub wer: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_set: TestSet,
    pub system: String,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub mel_l1: MetricSummary,
    pub content_distance: MetricSummary,
    pub speaker_similarity: MetricSummary,
    /// Absent when no transcriber is available or every call failed.
    pub wer: Option<MetricSummary>,
}

impl EvalReport {
    /// Aggregates rows after sorting them by utterance and target speaker.
    pub fn from_rows(test_set: TestSet, system: &str, seed: u64, mut rows: Vec<EvalRow>) -> Result<Self> {
        rows.sort_by(|a, b| (&a.utt_id, &a.target_speaker).cmp(&(&b.utt_id, &b.target_speaker)));
        let col = |f: fn(&EvalRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
        let empty = || Error::Input("no evaluation rows".into());
        let wer: Vec<f64> = rows.iter().filter_map(|r| r.wer).collect();
        Ok(Self {
            test_set,
            system: system.to_owned(),
            seed,
            mel_l1: MetricSummary::of(&col(|r| r.mel_l1)).ok_or_else(empty)?,
            content_distance: MetricSummary::of(&col(|r| r.content_distance)).ok_or_else(empty)?,
            speaker_similarity: MetricSummary::of(&col(|r| r.speaker_similarity)).ok_or_else(empty)?,
            wer: MetricSummary::of(&wer),
            rows,
        })
    }

    /// Plain-text table of rows and aggregates.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:<14} {:>8} {:>9} {:>9} {:>7}\n",
            "utt_id", "target", "mel_l1", "content", "spk_sim", "wer"
        );
        for r in &self.rows {
            let wer = r.wer.map_or("-".to_owned(), |w| format!("{w:.3}"));
            out += &format!(
                "{:<16} {:<14} {:>8.4} {:>9.4} {:>9.4} {:>7}\n",
                r.utt_id, r.target_speaker, r.mel_l1, r.content_distance, r.speaker_similarity, wer
            );
        }
        out += &format!(
            "\n{} / {}: {} rows\n{:<19}{}\n{:<19}{}\n{:<19}{}\n{:<19}{}\n",
            self.test_set,
            self.system,
            self.rows.len(),
            "mel_l1",
            self.mel_l1,
            "content_distance",
            self.content_distance,
            "speaker_similarity",
            self.speaker_similarity,
            "wer",
            self.wer.map_or("absent".to_owned(), |w| w.to_string())
        );
        out
    }
}

fn single(mel: &Matrix) -> (PaddedLayout, Matrix) {
    (PaddedLayout::new(vec![mel.nrows()]), mel.clone())
}

/// Content encodings of `mel` cut by `durations`, one row per phoneme.
pub(crate) fn content_encoding(ctx: &SynthContext, mel: &Matrix, durations: &[usize]) -> Result<Matrix> {
    let s = Session::inference(ctx.params);
    let (layout, packed) = single(mel);
    let enc = ctx.model.content.encode(&s, s.constant(packed), &layout, &[durations.to_vec()])?;
    let z = s.value(enc.z).clone();
    Ok(z)
}

/// Speaker encoding of a whole mel.
pub(crate) fn speaker_encoding(ctx: &SynthContext, mel: &Matrix) -> Result<Vec<f64>> {
    let s = Session::inference(ctx.params);
    let (layout, packed) = single(mel);
    let enc = ctx.model.speaker.encode(&s, s.constant(packed), &layout)?;
    let z = s.value(enc.z).row(0).to_vec();
    Ok(z)
}

/// Mean phoneme-wise cosine distance between two encodings.
fn mean_row_distance(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.nrows();
    (0..n)
        .map(|t| cosine_distance(a.row(t).as_slice().expect("contiguous"), b.row(t).as_slice().expect("contiguous")))
        .sum::<f64>()
        / n as f64
}

/// Teacher-forced `(mel_pre, mel_post)` of an utterance with its own
/// speaker, durations and prosody.
fn teacher_forced(ctx: &SynthContext, u: &Utterance) -> Result<(Matrix, Matrix)> {
    let s = Session::inference(ctx.params);
    let speaker = ctx.manifest.speaker_index(&u.speaker)?;
    let prosody = Prosody {
        f0: vec![u.f0.clone()],
        energy: vec![u.energy.clone()],
    };
    let phonemes = [u.phonemes.clone()];
    let durations = [u.durations.clone()];
    let out = ctx.model.acoustic.forward(
        &s,
        &AcousticInputs {
            phonemes: &phonemes,
            conditioning: Conditioning::uniform(&[speaker]),
            durations: Some(&durations),
            prosody: ctx.fe_enabled().then_some(&prosody),
        },
    )?;
    let pre = s.value(out.mel_pre).clone();
    let post = s.value(out.mel_post).clone();
    Ok((pre, post))
}

fn mean_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).mapv(f64::abs).mean().expect("non-empty mel")
}

/// Mean teacher-forced L1 between the decoder output (before the residual)
/// and the ground truth over the held-out split.
pub fn heldout_recon_l1(ctx: &SynthContext) -> Result<f64> {
    let test: Vec<&Utterance> = ctx.manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Input("empty test split".into()));
    }
    let mut total = 0.0;
    for u in &test {
        let (pre, _) = teacher_forced(ctx, u)?;
        total += mean_abs_diff(&pre, &u.mel.frames);
    }
    Ok(total / test.len() as f64)
}

/// Scores held-out synthesis with `system`.
///
/// `inter_lan` voices each held-out anchor-speaker text with every speaker
/// of another language and measures content distance to the anchor's
/// ground truth. `intra_lan` voices every held-out text with its own
/// speaker. Speaker similarity compares against a ground-truth utterance of
/// the target speaker chosen with `seed`.
pub fn evaluate(ctx: &SynthContext, system: &dyn SynthesisSystem, test_set: TestSet, seed: u64, asr: Option<&AsrClient>) -> Result<EvalReport> {
    let manifest = ctx.manifest;
    let mut test: Vec<&Utterance> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Input("empty test split".into()));
    }
    test.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for u in &test {
        let targets: Vec<&str> = match test_set {
            TestSet::InterLan => {
                if manifest.anchor_of(&u.language)? != u.speaker {
                    continue;
                }
                manifest
                    .speakers
                    .iter()
                    .filter(|s| s.language != u.language)
                    .map(|s| s.tag.as_str())
                    .collect()
            }
            TestSet::IntraLan => vec![u.speaker.as_str()],
        };
        let (_, post) = teacher_forced(ctx, u)?;
        let mel_l1 = mean_abs_diff(&post, &u.mel.frames);
        let gt_content = content_encoding(ctx, &u.mel.frames, &u.durations)?;
        for target in targets {
            let out = synthesize(
                ctx,
                system,
                &SynthRequest {
                    phonemes: u.phonemes.clone(),
                    speaker: target.to_owned(),
                },
            )?;
            let synth_content = content_encoding(ctx, &out.mel.frames, &out.metadata.durations)?;
            let references: Vec<&Utterance> = test
                .iter()
                .copied()
                .filter(|r| r.speaker == target && r.utt_id != u.utt_id)
                .collect();
            let reference = *references
                .choose(&mut rng)
                .ok_or_else(|| Error::Input(format!("no held-out reference for {target}")))?;
            let sim = 1.0 - cosine_distance(&speaker_encoding(ctx, &out.mel.frames)?, &speaker_encoding(ctx, &reference.mel.frames)?);
            let wer = asr.and_then(|client| {
                let text: Vec<&str> = u.phonemes.iter().filter_map(|&p| manifest.inventory.symbol(p)).collect();
                client.word_error_rate(&out.mel, &text.join(" ")).ok()
            });
            rows.push(EvalRow {
                utt_id: u.utt_id.clone(),
                text_language: u.language.clone(),
                target_speaker: target.to_owned(),
                reference_utt: reference.utt_id.clone(),
                mel_l1,
                content_distance: mean_row_distance(&gt_content, &synth_content),
                speaker_similarity: sim,
                wer,
            });
        }
    }
    EvalReport::from_rows(test_set, system.name(), seed, rows)
}
