//! Duration-based multi-speaker acoustic model.
//!
//! Text encoder (phoneme embedding, two width-3 convolutions, bidirectional
//! GRU), speaker embedding table, duration predictor, optional phoneme-level
//! f0/energy predictors whose values are quantized into trainable
//! embeddings, a length regulator, a GRU decoder conditioned on the speaker
//! embedding, and a convolutional post-net producing a residual.

use rand::Rng;
use serde::{Deserialize, Serialize};
use ttts_tape::{ParamStore, Session, Var};

use crate::layout::{regulation_index, PaddedLayout};
use crate::nn::{BiGru, Conv3, Embedding, Gru, Linear};
use crate::synth::F0Adaptation;
use crate::{Error, Matrix, Result};

/// Parameter-name prefixes of the two embedding tables.
pub const SPEAKER_TABLE_PREFIX: &str = "spk_emb.";
pub const LINGUISTIC_TABLE_PREFIX: &str = "ling_emb.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationDomain {
    /// Predictions and targets are `ln(frames)`.
    #[default]
    Log,
    /// Predictions and targets are raw frame counts.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub n_mels: usize,
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub phoneme_emb_dim: usize,
    pub speaker_emb_dim: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub postnet_dim: usize,
    pub predictor_dim: usize,
    pub fe_enabled: bool,
    pub f0_bins: usize,
    pub energy_bins: usize,
    pub prosody_emb_dim: usize,
    pub f0_range_hz: (f64, f64),
    pub energy_range: (f64, f64),
    pub duration_domain: DurationDomain,
}

impl AcousticConfig {
    pub fn new(n_phonemes: usize, n_speakers: usize, n_mels: usize) -> Self {
        Self {
            n_mels,
            n_phonemes,
            n_speakers,
            phoneme_emb_dim: 32,
            speaker_emb_dim: 16,
            encoder_dim: 64,
            decoder_dim: 64,
            decoder_layers: 1,
            postnet_dim: 32,
            predictor_dim: 32,
            fe_enabled: true,
            f0_bins: 32,
            energy_bins: 32,
            prosody_emb_dim: 8,
            f0_range_hz: (60.0, 400.0),
            energy_range: (0.0, 2.0),
            duration_domain: DurationDomain::Log,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_mels", self.n_mels),
            ("n_phonemes", self.n_phonemes),
            ("n_speakers", self.n_speakers),
            ("phoneme_emb_dim", self.phoneme_emb_dim),
            ("speaker_emb_dim", self.speaker_emb_dim),
            ("encoder_dim", self.encoder_dim),
            ("decoder_dim", self.decoder_dim),
            ("decoder_layers", self.decoder_layers),
            ("postnet_dim", self.postnet_dim),
            ("predictor_dim", self.predictor_dim),
            ("prosody_emb_dim", self.prosody_emb_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.encoder_dim.is_multiple_of(2) {
            return Err(Error::Config("encoder_dim must be even (bidirectional)".into()));
        }
        if self.f0_bins < 2 || self.energy_bins < 2 {
            return Err(Error::Config("prosody bins must be at least 2".into()));
        }
        if !(self.f0_range_hz.0 < self.f0_range_hz.1) || !(self.energy_range.0 < self.energy_range.1) {
            return Err(Error::Config("prosody ranges need min < max".into()));
        }
        Ok(())
    }
}

/// Bin of `value` among `bins` equal-width bins over `range`; values outside
/// the range land in the edge bins.
pub fn quantize_prosody(value: f64, range: (f64, f64), bins: usize) -> usize {
    let (lo, hi) = range;
    let position = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((position * bins as f64).floor() as usize).min(bins - 1)
}

fn normalize(value: f64, range: (f64, f64)) -> f64 {
    (value - range.0) / (range.1 - range.0)
}

fn denormalize(value: f64, range: (f64, f64)) -> f64 {
    range.0 + value * (range.1 - range.0)
}

/// Inference-time duration: exponentiate (log domain), round half up, and
/// clamp to at least one frame.
pub fn round_duration(prediction: f64, domain: DurationDomain) -> usize {
    let frames = match domain {
        DurationDomain::Log => prediction.exp(),
        DurationDomain::Raw => prediction,
    };
    let rounded = (frames + 0.5).floor();
    if rounded.is_finite() && rounded >= 1.0 {
        rounded as usize
    } else {
        1
    }
}

/// Duration-loss target for a frame count.
pub fn duration_target(frames: usize, domain: DurationDomain) -> f64 {
    match domain {
        DurationDomain::Log => (frames as f64).ln(),
        DurationDomain::Raw => frames as f64,
    }
}

/// Expands per-phoneme rows by duration: row `j` of the output is the row of
/// the phoneme whose span contains frame `j`.
pub fn length_regulate(states: &Matrix, durations: &[usize]) -> Result<Matrix> {
    if states.nrows() != durations.len() {
        return Err(Error::Alignment(format!(
            "{} states for {} durations",
            states.nrows(),
            durations.len()
        )));
    }
    let layout = PaddedLayout::new(vec![durations.len()]);
    let (frames, index) = regulation_index(&layout, &[durations.to_vec()])?;
    let mut out = Matrix::zeros((frames.rows(), states.ncols()));
    for (r, src) in index.iter().enumerate() {
        out.row_mut(r).assign(&states.row(src.expect("single item has no padding")));
    }
    Ok(out)
}

/// Which speaker embedding each consumer reads, per batch item.
///
/// Normally every entry equals the decoder speaker. Prosody transfer swaps in
/// the anchor speaker for the duration, f0 and energy predictors only.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub decoder: Vec<usize>,
    pub duration: Vec<usize>,
    pub f0: Vec<usize>,
    pub energy: Vec<usize>,
    pub f0_adaptation: Vec<Option<F0Adaptation>>,
}

impl Conditioning {
    pub fn uniform(speakers: &[usize]) -> Self {
        Self {
            decoder: speakers.to_vec(),
            duration: speakers.to_vec(),
            f0: speakers.to_vec(),
            energy: speakers.to_vec(),
            f0_adaptation: vec![None; speakers.len()],
        }
    }
}

/// Ground-truth phoneme-level prosody in natural units, one sequence per item.
#[derive(Clone, Debug, PartialEq)]
pub struct Prosody {
    pub f0: Vec<Vec<f64>>,
    pub energy: Vec<Vec<f64>>,
}

pub struct AcousticInputs<'a> {
    pub phonemes: &'a [Vec<usize>],
    pub conditioning: Conditioning,
    /// Ground-truth durations (teacher forcing); `None` uses predictions.
    pub durations: Option<&'a [Vec<usize>]>,
    /// Ground-truth prosody (teacher forcing); `None` uses predictions.
    pub prosody: Option<&'a Prosody>,
}

/// Speaker-embedding rows each consumer actually received, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningTrace {
    pub decoder: Matrix,
    pub duration: Matrix,
    pub f0: Option<Matrix>,
    pub energy: Option<Matrix>,
}

pub struct AcousticOutputs {
    pub phonemes: PaddedLayout,
    pub frames: PaddedLayout,
    /// Linguistic embeddings `e^C_t`, phoneme layout.
    pub linguistic: Var,
    pub mel_pre: Var,
    pub residual: Var,
    pub mel_post: Var,
    /// Duration predictions in the configured domain, phoneme layout.
    pub durations_pred: Var,
    /// Normalized f0/energy predictions (FE variant), phoneme layout.
    pub f0_pred: Option<Var>,
    pub energy_pred: Option<Var>,
    pub durations_used: Vec<Vec<usize>>,
    pub f0_used: Option<Vec<Vec<f64>>>,
    pub energy_used: Option<Vec<Vec<f64>>>,
    pub trace: ConditioningTrace,
}

struct Predictor {
    hidden: Linear,
    out: Linear,
}

impl Predictor {
    fn new(name: &str, input: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(&format!("{name}.hidden"), input, hidden),
            out: Linear::new(&format!("{name}.out"), hidden, 1),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.hidden.init(store, rng);
        self.out.init(store, rng);
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        self.out.forward(s, s.tanh(self.hidden.forward(s, x)))
    }
}

pub struct AcousticModel {
    pub config: AcousticConfig,
    pub linguistic: Embedding,
    pub speakers: Embedding,
    conv1: Conv3,
    conv2: Conv3,
    encoder_rnn: BiGru,
    duration: Predictor,
    f0: Predictor,
    energy: Predictor,
    f0_emb: Embedding,
    energy_emb: Embedding,
    prenet: Linear,
    decoder_rnn: Vec<Gru>,
    mel_out: Linear,
    postnet: [Conv3; 3],
}

impl AcousticModel {
    pub fn new(config: AcousticConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let pred_in = c.encoder_dim + c.speaker_emb_dim;
        let prosody_dim = if c.fe_enabled { 2 * c.prosody_emb_dim } else { 0 };
        let decoder_rnn = (0..c.decoder_layers)
            .map(|i| Gru::new(&format!("dec.rnn{i}"), c.decoder_dim, c.decoder_dim))
            .collect();
        Ok(Self {
            linguistic: Embedding::new("ling_emb", c.n_phonemes, c.phoneme_emb_dim),
            speakers: Embedding::new("spk_emb", c.n_speakers, c.speaker_emb_dim),
            conv1: Conv3::new("enc.conv1", c.phoneme_emb_dim, c.encoder_dim),
            conv2: Conv3::new("enc.conv2", c.encoder_dim, c.encoder_dim),
            encoder_rnn: BiGru::new("enc.rnn", c.encoder_dim, c.encoder_dim),
            duration: Predictor::new("dur", pred_in, c.predictor_dim),
            f0: Predictor::new("f0", pred_in, c.predictor_dim),
            energy: Predictor::new("energy", pred_in, c.predictor_dim),
            f0_emb: Embedding::new("f0_emb", c.f0_bins, c.prosody_emb_dim),
            energy_emb: Embedding::new("energy_emb", c.energy_bins, c.prosody_emb_dim),
            prenet: Linear::new("dec.prenet", c.encoder_dim + prosody_dim + c.speaker_emb_dim, c.decoder_dim),
            decoder_rnn,
            mel_out: Linear::new("dec.out", c.decoder_dim, c.n_mels),
            postnet: [
                Conv3::new("post.conv1", c.n_mels, c.postnet_dim),
                Conv3::new("post.conv2", c.postnet_dim, c.postnet_dim),
                Conv3::new("post.conv3", c.postnet_dim, c.n_mels),
            ],
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.linguistic.init(store, rng);
        self.speakers.init(store, rng);
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.encoder_rnn.init(store, rng);
        self.duration.init(store, rng);
        if self.config.fe_enabled {
            self.f0.init(store, rng);
            self.energy.init(store, rng);
            self.f0_emb.init(store, rng);
            self.energy_emb.init(store, rng);
        }
        self.prenet.init(store, rng);
        for rnn in &self.decoder_rnn {
            rnn.init(store, rng);
        }
        self.mel_out.init(store, rng);
        for conv in &self.postnet {
            conv.init(store, rng);
        }
        // the residual starts near zero so early training fits the decoder
        // output first
        if let Some(w) = store.get_mut("post.conv3.w") {
            w.mapv_inplace(|x| x * 0.1);
        }
    }

    fn check_inputs(&self, inputs: &AcousticInputs) -> Result<()> {
        let c = &inputs.conditioning;
        let n = inputs.phonemes.len();
        if n == 0 {
            return Err(Error::Input("no sequences to synthesize".into()));
        }
        for (name, v) in [("decoder", &c.decoder), ("duration", &c.duration), ("f0", &c.f0), ("energy", &c.energy)] {
            if v.len() != n {
                return Err(Error::Input(format!("{name} conditioning has {} entries for {n} items", v.len())));
            }
            if let Some(&bad) = v.iter().find(|&&s| s >= self.config.n_speakers) {
                return Err(Error::Registry(format!("speaker index {bad} not registered")));
            }
        }
        if c.f0_adaptation.len() != n {
            return Err(Error::Input("f0 adaptation list length mismatch".into()));
        }
        for seq in inputs.phonemes {
            if seq.is_empty() {
                return Err(Error::Input("empty phoneme sequence".into()));
            }
            if let Some(&bad) = seq.iter().find(|&&p| p >= self.config.n_phonemes) {
                return Err(Error::Vocabulary {
                    index: bad,
                    size: self.config.n_phonemes,
                });
            }
        }
        let transfers_prosody = c.f0 != c.decoder || c.energy != c.decoder || c.f0_adaptation.iter().any(Option::is_some);
        if !self.config.fe_enabled && (transfers_prosody || inputs.prosody.is_some()) {
            return Err(Error::Unsupported("prosody conditioning needs an FE-enabled model".into()));
        }
        Ok(())
    }

    /// Phoneme-level encoder states and the linguistic embeddings they start
    /// from.
    pub fn encode_text(&self, s: &Session, layout: &PaddedLayout, index: Vec<Option<usize>>) -> (Var, Var) {
        let mask = layout.mask();
        let e = self.linguistic.lookup(s, index);
        let h = s.tanh(self.conv1.forward(s, e, layout, &mask));
        let h = s.tanh(self.conv2.forward(s, h, layout, &mask));
        let states = s.mask_rows(self.encoder_rnn.forward(s, h, layout), &mask);
        (states, e)
    }

    fn speaker_rows(&self, s: &Session, layout: &PaddedLayout, speakers: &[usize]) -> Var {
        self.speakers.lookup(s, layout.item_index(speakers))
    }

    fn first_rows(s: &Session, v: Var, layout: &PaddedLayout) -> Matrix {
        let m = s.value(v);
        Matrix::from_shape_fn((layout.batch(), m.ncols()), |(b, c)| m[[layout.row(0, b), c]])
    }

    pub fn forward(&self, s: &Session, inputs: &AcousticInputs) -> Result<AcousticOutputs> {
        self.check_inputs(inputs)?;
        let c = &self.config;
        let cond = &inputs.conditioning;
        let phonemes = PaddedLayout::new(inputs.phonemes.iter().map(Vec::len).collect());
        let index: Vec<Option<usize>> = (0..phonemes.rows())
            .map(|r| inputs.phonemes[r % phonemes.batch()].get(r / phonemes.batch()).copied())
            .collect();
        let (states, linguistic) = self.encode_text(s, &phonemes, index);

        let dur_spk = self.speaker_rows(s, &phonemes, &cond.duration);
        let durations_pred = self.duration.forward(s, s.concat_cols(&[states, dur_spk]));
        let durations_used: Vec<Vec<usize>> = match inputs.durations {
            Some(given) => given.to_vec(),
            None => {
                let pred = s.value(durations_pred);
                (0..phonemes.batch())
                    .map(|b| {
                        (0..phonemes.lengths()[b])
                            .map(|t| round_duration(pred[[phonemes.row(t, b), 0]], c.duration_domain))
                            .collect()
                    })
                    .collect()
            }
        };

        let mut trace = ConditioningTrace {
            decoder: Matrix::zeros((0, 0)),
            duration: Self::first_rows(s, dur_spk, &phonemes),
            f0: None,
            energy: None,
        };

        let mut features = states;
        let (mut f0_pred, mut energy_pred, mut f0_used, mut energy_used) = (None, None, None, None);
        if c.fe_enabled {
            let f0_spk = self.speaker_rows(s, &phonemes, &cond.f0);
            let energy_spk = self.speaker_rows(s, &phonemes, &cond.energy);
            trace.f0 = Some(Self::first_rows(s, f0_spk, &phonemes));
            trace.energy = Some(Self::first_rows(s, energy_spk, &phonemes));
            let fp = self.f0.forward(s, s.concat_cols(&[states, f0_spk]));
            let ep = self.energy.forward(s, s.concat_cols(&[states, energy_spk]));
            let (f0_hz, energy_val) = match inputs.prosody {
                Some(p) => (p.f0.clone(), p.energy.clone()),
                None => {
                    let (fv, ev) = (s.value(fp), s.value(ep));
                    let unpack = |m: &Matrix, range| -> Vec<Vec<f64>> {
                        (0..phonemes.batch())
                            .map(|b| {
                                (0..phonemes.lengths()[b])
                                    .map(|t| denormalize(m[[phonemes.row(t, b), 0]], range))
                                    .collect()
                            })
                            .collect()
                    };
                    let mut f0 = unpack(&fv, c.f0_range_hz);
                    for (seq, adapt) in f0.iter_mut().zip(&cond.f0_adaptation) {
                        if let Some(adapt) = adapt {
                            *seq = adapt.apply(seq)?;
                        }
                    }
                    (f0, unpack(&ev, c.energy_range))
                }
            };
            let bins = |values: &[Vec<f64>], range, n| -> Vec<Option<usize>> {
                (0..phonemes.rows())
                    .map(|r| {
                        values[r % phonemes.batch()]
                            .get(r / phonemes.batch())
                            .map(|&v| quantize_prosody(v, range, n))
                    })
                    .collect()
            };
            let f0_e = self.f0_emb.lookup(s, bins(&f0_hz, c.f0_range_hz, c.f0_bins));
            let energy_e = self.energy_emb.lookup(s, bins(&energy_val, c.energy_range, c.energy_bins));
            features = s.concat_cols(&[states, f0_e, energy_e]);
            f0_pred = Some(fp);
            energy_pred = Some(ep);
            f0_used = Some(f0_hz);
            energy_used = Some(energy_val);
        }

        let (frames, regulate) = regulation_index(&phonemes, &durations_used)?;
        let frame_mask = frames.mask();
        let expanded = s.gather_rows(features, regulate);
        let dec_spk = self.speaker_rows(s, &frames, &cond.decoder);
        trace.decoder = Self::first_rows(s, dec_spk, &frames);
        let mut h = s.tanh(self.prenet.forward(s, s.concat_cols(&[expanded, dec_spk])));
        for rnn in &self.decoder_rnn {
            h = rnn.forward(s, h, &frames, false).outputs;
        }
        let mel_pre = s.mask_rows(self.mel_out.forward(s, h), &frame_mask);
        let mut r = s.tanh(self.postnet[0].forward(s, mel_pre, &frames, &frame_mask));
        r = s.tanh(self.postnet[1].forward(s, r, &frames, &frame_mask));
        let residual = s.mask_rows(self.postnet[2].forward(s, r, &frames, &frame_mask), &frame_mask);
        let mel_post = s.add(mel_pre, residual);
        if s.value(mel_post).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite decoder output".into()));
        }
        Ok(AcousticOutputs {
            phonemes,
            frames,
            linguistic,
            mel_pre,
            residual,
            mel_post,
            durations_pred,
            f0_pred,
            energy_pred,
            durations_used,
            f0_used,
            energy_used,
            trace,
        })
    }

    /// Normalized f0 and energy targets for the FE losses, phoneme layout.
    pub fn prosody_targets(&self, layout: &PaddedLayout, prosody: &Prosody) -> (Matrix, Matrix) {
        let norm = |seqs: &[Vec<f64>], range| -> Matrix {
            let normalized: Vec<Vec<f64>> = seqs
                .iter()
                .map(|seq| seq.iter().map(|&v| normalize(v, range)).collect())
                .collect();
            let views: Vec<&[f64]> = normalized.iter().map(Vec::as_slice).collect();
            layout.pack_values(&views)
        };
        (norm(&prosody.f0, self.config.f0_range_hz), norm(&prosody.energy, self.config.energy_range))
    }
}
