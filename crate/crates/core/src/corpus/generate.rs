use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CorpusManifest, MelSpectrogram, PhonemeInventory, Speaker, Split, Utterance};
use crate::{Error, Matrix, Result};

const NOISE_STD: f64 = 0.1;
const F0_JITTER_HZ: f64 = 2.0;
const ENERGY_JITTER: f64 = 0.02;
const F0_BUMP_RANGE_HZ: (f64, f64) = (60.0, 400.0);
const TEST_EVERY: usize = 10;
const MIN_PHONEMES: usize = 5;
const MAX_PHONEMES: usize = 20;

/// Per-speaker voice parameters the generator renders with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorVoice {
    pub base_f0_hz: f64,
    /// Multiplier on every phoneme's base duration.
    pub tempo: f64,
    pub energy_scale: f64,
}

/// Affine per-speaker coloring: `frame = gain * content + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTint {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Three speakers over two languages: a native anchor for each language
/// plus a second, lower-pitched and faster L1 speaker.
pub fn default_speakers() -> Vec<Speaker> {
    let voice = |base_f0_hz, tempo, energy_scale| GeneratorVoice {
        base_f0_hz,
        tempo,
        energy_scale,
    };
    vec![
        Speaker {
            tag: "anchor-L1".into(),
            language: "L1".into(),
            anchor: true,
            voice: voice(220.0, 1.0, 1.0),
        },
        Speaker {
            tag: "anchor-L2".into(),
            language: "L2".into(),
            anchor: true,
            voice: voice(200.0, 1.3, 0.9),
        },
        Speaker {
            tag: "extra-L1".into(),
            language: "L1".into(),
            anchor: false,
            voice: voice(120.0, 0.8, 1.1),
        },
    ]
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn bump(n_mels: usize, center: f64, width: f64, amp: f64) -> Vec<f64> {
    (0..n_mels)
        .map(|k| amp * (-(k as f64 - center).powi(2) / (2.0 * width * width)).exp())
        .collect()
}

/// Content and voice tables derived from a seed. Kept separate from the
/// corpus so tests can compare utterances against the clean rendering.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    n_mels: usize,
    templates: Vec<Vec<f64>>,
    base_durations: Vec<f64>,
    f0_offsets: Vec<f64>,
    energy_bases: Vec<f64>,
    tints: Vec<SpectralTint>,
    voices: Vec<GeneratorVoice>,
}

impl ToyGenerator {
    pub fn new(inventory: &PhonemeInventory, speakers: &[Speaker], seed: u64, n_mels: usize) -> Self {
        let scale = n_mels as f64 / 80.0;
        let mut rng = stream(seed, 1, 0);
        let mut templates = Vec::new();
        let mut base_durations = Vec::new();
        let mut f0_offsets = Vec::new();
        let mut energy_bases = Vec::new();
        let lo = 0.05 * n_mels as f64;
        let hi = 0.95 * n_mels as f64;
        for _ in 0..inventory.len() {
            let main = bump(n_mels, rng.gen_range(lo..hi), rng.gen_range(2.0..6.0) * scale, rng.gen_range(0.8..1.6));
            let side = bump(n_mels, rng.gen_range(lo..hi), rng.gen_range(3.0..8.0) * scale, rng.gen_range(0.3..0.8));
            templates.push(main.iter().zip(&side).map(|(a, b)| a + b).collect());
            base_durations.push(f64::from(rng.gen_range(2u32..=5)));
            f0_offsets.push(rng.gen_range(-0.15..0.15));
            energy_bases.push(rng.gen_range(0.7..1.3));
        }
        let tints = (0..speakers.len())
            .map(|s| {
                let mut rng = stream(seed, 2, s as u64);
                let amp = rng.gen_range(0.15..0.3);
                let freq = rng.gen_range(0.5..2.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let level = rng.gen_range(-0.3..0.3);
                let slope = rng.gen_range(-0.4..0.4);
                let n = n_mels as f64;
                SpectralTint {
                    gain: (0..n_mels)
                        .map(|k| 1.0 + amp * (2.0 * PI * freq * k as f64 / n + phase).sin())
                        .collect(),
                    bias: (0..n_mels)
                        .map(|k| level + slope * (k as f64 / n - 0.5))
                        .collect(),
                }
            })
            .collect();
        Self {
            n_mels,
            templates,
            base_durations,
            f0_offsets,
            energy_bases,
            tints,
            voices: speakers.iter().map(|s| s.voice.clone()).collect(),
        }
    }

    pub fn template(&self, phoneme: usize) -> &[f64] {
        &self.templates[phoneme]
    }

    pub fn tint(&self, speaker: usize) -> &SpectralTint {
        &self.tints[speaker]
    }

    /// Nominal phoneme-level f0 for a speaker, before jitter.
    pub fn nominal_f0(&self, phoneme: usize, speaker: usize) -> f64 {
        self.voices[speaker].base_f0_hz * (1.0 + self.f0_offsets[phoneme])
    }

    pub fn nominal_energy(&self, phoneme: usize, speaker: usize) -> f64 {
        self.energy_bases[phoneme] * self.voices[speaker].energy_scale
    }

    pub fn nominal_duration(&self, phoneme: usize, speaker: usize) -> f64 {
        self.base_durations[phoneme] * self.voices[speaker].tempo
    }

    /// Noise-free frame for phoneme `phoneme` spoken by `speaker` at the
    /// given prosody.
    pub fn render_clean(&self, phoneme: usize, speaker: usize, f0: f64, energy: f64) -> Vec<f64> {
        let tint = &self.tints[speaker];
        let (lo, hi) = F0_BUMP_RANGE_HZ;
        let position = ((f0 - lo) / (hi - lo)).clamp(0.0, 1.0);
        let scale = self.n_mels as f64 / 80.0;
        let pitch = bump(self.n_mels, 1.0 + position * 0.2 * self.n_mels as f64, 1.5 * scale, 0.5);
        (0..self.n_mels)
            .map(|k| tint.gain[k] * energy * self.templates[phoneme][k] + tint.bias[k] + pitch[k])
            .collect()
    }
}

fn check_setup(n_utts_per_speaker: usize, inventory: &PhonemeInventory, speakers: &[Speaker]) -> Result<BTreeMap<String, String>> {
    if n_utts_per_speaker == 0 {
        return Err(Error::Config("need at least one utterance per speaker".into()));
    }
    let languages = inventory.languages();
    if languages.len() < 2 {
        return Err(Error::Config(format!("need at least 2 languages, inventory has {}", languages.len())));
    }
    if speakers.len() < 3 {
        return Err(Error::Config(format!("need at least 3 speakers, got {}", speakers.len())));
    }
    let mut anchors = BTreeMap::new();
    for lang in &languages {
        let natives: Vec<&Speaker> = speakers.iter().filter(|s| &s.language == lang).collect();
        if natives.is_empty() {
            return Err(Error::Config(format!("language `{lang}` has no speaker")));
        }
        let anchor: Vec<&&Speaker> = natives.iter().filter(|s| s.anchor).collect();
        if anchor.len() != 1 {
            return Err(Error::Config(format!(
                "language `{lang}` needs exactly one anchor speaker, found {}",
                anchor.len()
            )));
        }
        anchors.insert(lang.clone(), anchor[0].tag.clone());
    }
    for s in speakers {
        if !languages.contains(&s.language) {
            return Err(Error::Config(format!("speaker `{}` native to unknown language `{}`", s.tag, s.language)));
        }
    }
    Ok(anchors)
}

/// Renders a deterministic corpus for `seed`.
///
/// Every tenth utterance of each speaker goes to the test split.
pub fn generate_toy_corpus(
    n_utts_per_speaker: usize,
    inventory: &PhonemeInventory,
    speakers: &[Speaker],
    seed: u64,
    n_mels: usize,
) -> Result<CorpusManifest> {
    let anchor_speaker_of = check_setup(n_utts_per_speaker, inventory, speakers)?;
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be positive".into()));
    }
    let generator = ToyGenerator::new(inventory, speakers, seed, n_mels);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let f0_jitter = Normal::new(0.0, F0_JITTER_HZ).expect("valid std");
    let energy_jitter = Normal::new(0.0, ENERGY_JITTER).expect("valid std");

    let mut utterances = Vec::with_capacity(n_utts_per_speaker * speakers.len());
    for (s, speaker) in speakers.iter().enumerate() {
        let pool = inventory.indices_for(&speaker.language);
        for j in 0..n_utts_per_speaker {
            let mut rng = stream(seed, 3 + s as u64, j as u64);
            let len = rng.gen_range(MIN_PHONEMES..=MAX_PHONEMES);
            let phonemes: Vec<usize> = (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let mut durations = Vec::with_capacity(len);
            let mut f0 = Vec::with_capacity(len);
            let mut energy = Vec::with_capacity(len);
            for &p in &phonemes {
                let jitter = match rng.gen_range(0..10) {
                    0 | 1 => -1,
                    8 | 9 => 1,
                    _ => 0,
                };
                let d = (generator.nominal_duration(p, s).round() as i64 + jitter).max(1);
                durations.push(d as usize);
                f0.push(generator.nominal_f0(p, s) + f0_jitter.sample(&mut rng));
                energy.push((generator.nominal_energy(p, s) + energy_jitter.sample(&mut rng)).max(0.0));
            }
            let total: usize = durations.iter().sum();
            let mut frames = Matrix::zeros((total, n_mels));
            let mut row = 0;
            for (t, &p) in phonemes.iter().enumerate() {
                let clean = generator.render_clean(p, s, f0[t], energy[t]);
                for _ in 0..durations[t] {
                    for (k, c) in clean.iter().enumerate() {
                        // stored as f32 on disk; round now so memory and disk agree
                        frames[[row, k]] = f64::from((c + noise.sample(&mut rng)) as f32);
                    }
                    row += 1;
                }
            }
            utterances.push(Utterance {
                utt_id: format!("{}-{j:04}", speaker.tag),
                phonemes,
                language: speaker.language.clone(),
                speaker: speaker.tag.clone(),
                mel: MelSpectrogram::new(frames)?,
                durations,
                f0,
                energy,
                split: if j % TEST_EVERY == TEST_EVERY - 1 { Split::Test } else { Split::Train },
            });
        }
    }
    let manifest = CorpusManifest {
        inventory: inventory.clone(),
        speakers: speakers.to_vec(),
        anchor_speaker_of,
        seed,
        n_mels,
        noise_std: NOISE_STD,
        utterances,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::segment_mel;

    fn small(n: usize, seed: u64) -> CorpusManifest {
        generate_toy_corpus(n, &PhonemeInventory::toy(12, 6), &default_speakers(), seed, 80).unwrap()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn one_utterance_per_speaker() {
        let m = small(1, 3);
        assert_eq!(m.utterances.len(), 3);
        for u in &m.utterances {
            u.validate().unwrap();
            assert!((MIN_PHONEMES..=MAX_PHONEMES).contains(&u.num_phonemes()));
        }
        assert_eq!(m.anchor_of("L1").unwrap(), "anchor-L1");
        assert_eq!(m.anchor_of("L2").unwrap(), "anchor-L2");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        assert_eq!(small(4, 7), small(4, 7));
        assert_ne!(small(4, 7), small(4, 8));
    }

    #[test]
    fn rejects_bad_setups() {
        let inv = PhonemeInventory::toy(4, 2);
        let speakers = default_speakers();
        assert!(matches!(generate_toy_corpus(0, &inv, &speakers, 1, 80), Err(Error::Config(_))));
        let only_l1: Vec<Speaker> = speakers.iter().filter(|s| s.language == "L1").cloned().collect();
        assert!(matches!(generate_toy_corpus(1, &inv, &only_l1, 1, 80), Err(Error::Config(_))));
        let one_lang = PhonemeInventory::new(vec![("a".into(), "L1".into()), ("b".into(), "shared".into())]).unwrap();
        assert!(matches!(generate_toy_corpus(1, &one_lang, &speakers, 1, 80), Err(Error::Config(_))));
        let mut two_anchors = speakers.clone();
        two_anchors[2].anchor = true;
        assert!(matches!(generate_toy_corpus(1, &inv, &two_anchors, 1, 80), Err(Error::Config(_))));
    }

    #[test]
    fn same_phonemes_across_speakers_correlate_more_than_different_phonemes() {
        let inv = PhonemeInventory::toy(12, 6);
        let speakers = default_speakers();
        let g = ToyGenerator::new(&inv, &speakers, 7, 80);
        let render = |p: usize, s: usize| g.render_clean(p, s, g.nominal_f0(p, 0), 1.0);
        let (mut same, mut same_n, mut diff, mut diff_n) = (0.0, 0.0, 0.0, 0.0);
        for p in 0..inv.len() {
            for a in 0..speakers.len() {
                for b in (a + 1)..speakers.len() {
                    same += pearson(&render(p, a), &render(p, b));
                    same_n += 1.0;
                }
            }
            for q in 0..inv.len() {
                if q != p {
                    diff += pearson(&render(p, 0), &render(q, 0));
                    diff_n += 1.0;
                }
            }
        }
        let (same, diff) = (same / same_n, diff / diff_n);
        assert!(same > diff + 0.3, "same-phoneme {same} vs cross-phoneme {diff}");
    }

    #[test]
    fn averaged_segment_matches_clean_rendering() {
        let m = small(10, 11);
        let g = ToyGenerator::new(&m.inventory, &m.speakers, m.seed, m.n_mels);
        for u in &m.utterances {
            let s = m.speaker_index(&u.speaker).unwrap();
            let segments = segment_mel(&u.mel, &u.durations).unwrap();
            for (t, seg) in segments.iter().enumerate() {
                let d = seg.nrows() as f64;
                let mean = seg.mean_axis(ndarray::Axis(0)).unwrap();
                let clean = g.render_clean(u.phonemes[t], s, u.f0[t], u.energy[t]);
                // mean of d Gaussian draws: 6 standard errors plus f32 rounding
                let bound = 6.0 * NOISE_STD / d.sqrt() + 1e-6;
                for k in 0..m.n_mels {
                    assert!((mean[k] - clean[k]).abs() < bound, "{} phoneme {t} bin {k}", u.utt_id);
                }
            }
        }
    }

    #[test]
    fn test_split_is_every_tenth() {
        let m = small(20, 1);
        assert_eq!(m.split(Split::Test).count(), 6);
        assert!(m.get("anchor-L2-0009").unwrap().split == Split::Test);
    }
}
