//! Time-major padded layout for variable-length batches.
//!
//! Step `t` of item `b` lives in row `t * batch + b`. A GRU then reads one
//! contiguous block of rows per step, and shifting by `batch` rows moves one
//! step in time.

use crate::{Error, Matrix, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedLayout {
    lengths: Vec<usize>,
    steps: usize,
}

impl PaddedLayout {
    pub fn new(lengths: Vec<usize>) -> Self {
        let steps = lengths.iter().copied().max().unwrap_or(0);
        Self { lengths, steps }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rows(&self) -> usize {
        self.steps * self.batch()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch() + b
    }

    pub fn valid(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }

    pub fn valid_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `rows x 1` column of 1.0 on valid rows, 0.0 on padding.
    pub fn mask(&self) -> Matrix {
        Matrix::from_shape_fn((self.rows(), 1), |(r, _)| {
            f64::from(u8::from(self.valid(r / self.batch(), r % self.batch())))
        })
    }

    /// `batch x 1` validity mask of step `t`.
    pub fn step_mask(&self, t: usize) -> Matrix {
        Matrix::from_shape_fn((self.batch(), 1), |(b, _)| f64::from(u8::from(self.valid(t, b))))
    }

    /// Stacks per-item `len_b x C` matrices into the padded layout.
    pub fn pack(&self, items: &[&Matrix]) -> Matrix {
        assert_eq!(items.len(), self.batch());
        let cols = items.first().map_or(0, |m| m.ncols());
        let mut out = Matrix::zeros((self.rows(), cols));
        for (b, m) in items.iter().enumerate() {
            assert_eq!(m.nrows(), self.lengths[b], "item {b} length");
            for t in 0..m.nrows() {
                out.row_mut(self.row(t, b)).assign(&m.row(t));
            }
        }
        out
    }

    /// Packs per-item scalar sequences into a `rows x 1` column.
    pub fn pack_values(&self, items: &[&[f64]]) -> Matrix {
        assert_eq!(items.len(), self.batch());
        let mut out = Matrix::zeros((self.rows(), 1));
        for (b, values) in items.iter().enumerate() {
            for (t, &v) in values.iter().enumerate() {
                out[[self.row(t, b), 0]] = v;
            }
        }
        out
    }

    /// Inverse of [`PaddedLayout::pack`].
    pub fn unpack(&self, m: &Matrix) -> Vec<Matrix> {
        assert_eq!(m.nrows(), self.rows());
        (0..self.batch())
            .map(|b| {
                Matrix::from_shape_fn((self.lengths[b], m.ncols()), |(t, c)| m[[self.row(t, b), c]])
            })
            .collect()
    }

    /// Per-row index for broadcasting one value per item onto every valid
    /// row (`None` on padding).
    pub fn item_index(&self, per_item: &[usize]) -> Vec<Option<usize>> {
        (0..self.rows())
            .map(|r| {
                let (t, b) = (r / self.batch(), r % self.batch());
                self.valid(t, b).then_some(per_item[b])
            })
            .collect()
    }

    /// `batch x rows` matrix whose product with a `rows x 1` column averages
    /// each item's valid rows.
    pub fn mean_pool(&self) -> Matrix {
        let mut out = Matrix::zeros((self.batch(), self.rows()));
        for b in 0..self.batch() {
            let len = self.lengths[b];
            for t in 0..len {
                out[[b, self.row(t, b)]] = 1.0 / len as f64;
            }
        }
        out
    }
}

/// Gather index that expands phoneme rows into frame rows.
///
/// Returns the frame layout and, for each frame row, the phoneme row whose
/// duration span contains it.
pub fn regulation_index(phonemes: &PaddedLayout, durations: &[Vec<usize>]) -> Result<(PaddedLayout, Vec<Option<usize>>)> {
    if durations.len() != phonemes.batch() {
        return Err(Error::Alignment(format!(
            "{} duration sequences for a batch of {}",
            durations.len(),
            phonemes.batch()
        )));
    }
    for (b, d) in durations.iter().enumerate() {
        if d.len() != phonemes.lengths()[b] {
            return Err(Error::Alignment(format!(
                "item {b}: {} durations for {} phonemes",
                d.len(),
                phonemes.lengths()[b]
            )));
        }
        if d.contains(&0) {
            return Err(Error::Alignment(format!("item {b}: zero duration")));
        }
    }
    let frames = PaddedLayout::new(durations.iter().map(|d| d.iter().sum()).collect());
    let mut index = vec![None; frames.rows()];
    for (b, d) in durations.iter().enumerate() {
        let mut t = 0;
        for (p, &len) in d.iter().enumerate() {
            for _ in 0..len {
                index[frames.row(t, b)] = Some(phonemes.row(p, b));
                t += 1;
            }
        }
    }
    Ok((frames, index))
}

/// Gather index that cuts frame rows into per-phoneme segments.
///
/// The segment layout treats every phoneme row `(p, b)` as its own batch
/// item, so a recurrent encoder run over it yields one summary per phoneme
/// row, already in phoneme layout.
pub fn segment_index(phonemes: &PaddedLayout, frames: &PaddedLayout, durations: &[Vec<usize>]) -> (PaddedLayout, Vec<Option<usize>>) {
    let mut lengths = vec![0; phonemes.rows()];
    let mut starts = vec![0; phonemes.rows()];
    for (b, d) in durations.iter().enumerate() {
        let mut start = 0;
        for (p, &len) in d.iter().enumerate() {
            lengths[phonemes.row(p, b)] = len;
            starts[phonemes.row(p, b)] = start;
            start += len;
        }
    }
    let segments = PaddedLayout::new(lengths);
    let mut index = vec![None; segments.rows()];
    for slot in 0..segments.batch() {
        let b = slot % phonemes.batch();
        for tau in 0..segments.lengths()[slot] {
            index[segments.row(tau, slot)] = Some(frames.row(starts[slot] + tau, b));
        }
    }
    (segments, index)
}
