use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CorpusManifest, MelSpectrogram, Split, Utterance};
use crate::layout::PaddedLayout;
use crate::{Error, Matrix, Result};

/// Splits `mel` into contiguous per-phoneme segments.
pub fn segment_mel(mel: &MelSpectrogram, durations: &[usize]) -> Result<Vec<Matrix>> {
    if durations.contains(&0) {
        return Err(Error::Alignment("zero phoneme duration".into()));
    }
    let total: usize = durations.iter().sum();
    if total != mel.num_frames() {
        return Err(Error::Alignment(format!(
            "durations sum to {total} but mel has {} frames",
            mel.num_frames()
        )));
    }
    let mut start = 0;
    Ok(durations
        .iter()
        .map(|&d| {
            let seg = mel.frames.slice(ndarray::s![start..start + d, ..]).to_owned();
            start += d;
            seg
        })
        .collect())
}

/// Utterances padded into time-major tensors with validity masks.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub items: Vec<&'a Utterance>,
    pub phonemes: PaddedLayout,
    pub frames: PaddedLayout,
    /// `frames.rows() x n_mels`, zero on padding.
    pub mel: Matrix,
}

impl<'a> Batch<'a> {
    pub fn new(items: Vec<&'a Utterance>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for u in &items {
            u.validate()?;
        }
        let phonemes = PaddedLayout::new(items.iter().map(|u| u.num_phonemes()).collect());
        let frames = PaddedLayout::new(items.iter().map(|u| u.mel.num_frames()).collect());
        let mels: Vec<&Matrix> = items.iter().map(|u| &u.mel.frames).collect();
        let mel = frames.pack(&mels);
        Ok(Self {
            items,
            phonemes,
            frames,
            mel,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn phoneme_index(&self) -> Vec<Option<usize>> {
        (0..self.phonemes.rows())
            .map(|r| {
                let (t, b) = (r / self.len(), r % self.len());
                self.items[b].phonemes.get(t).copied()
            })
            .collect()
    }

    pub fn durations(&self) -> Vec<Vec<usize>> {
        self.items.iter().map(|u| u.durations.clone()).collect()
    }

    pub fn phoneme_sequences(&self) -> Vec<Vec<usize>> {
        self.items.iter().map(|u| u.phonemes.clone()).collect()
    }

    pub fn f0(&self) -> Matrix {
        let v: Vec<&[f64]> = self.items.iter().map(|u| u.f0.as_slice()).collect();
        self.phonemes.pack_values(&v)
    }

    pub fn energy(&self) -> Matrix {
        let v: Vec<&[f64]> = self.items.iter().map(|u| u.energy.as_slice()).collect();
        self.phonemes.pack_values(&v)
    }

    pub fn speaker_indices(&self, manifest: &CorpusManifest) -> Result<Vec<usize>> {
        self.items.iter().map(|u| manifest.speaker_index(&u.speaker)).collect()
    }
}

/// Samples `batch_size` training utterances, deterministically for a seed.
///
/// Draws without replacement while the training split is large enough,
/// with replacement otherwise.
pub fn load_batch(manifest: &CorpusManifest, batch_size: usize, rng_seed: u64) -> Result<Batch<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let pool: Vec<&Utterance> = manifest.split(Split::Train).collect();
    if pool.is_empty() {
        return Err(Error::Input("manifest has no training utterances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let items = if batch_size <= pool.len() {
        sample(&mut rng, pool.len(), batch_size).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    Batch::new(items)
}
