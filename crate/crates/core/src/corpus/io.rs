//! On-disk corpus layout.
//!
//! `corpus.jsonl` holds one header record followed by one record per
//! utterance; each utterance's mel lives in `mels/<utt_id>.mel`:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "TTTSMEL1"
//! 8       4     T_f   (u32, little endian)
//! 12      4     n_mels (u32, little endian)
//! 16      4*T_f*n_mels  frames, row-major f32 little endian
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusManifest, MelSpectrogram, PhonemeInventory, Speaker, Split, Utterance, FRAME_LENGTH_MS, FRAME_SHIFT_MS};
use crate::{Error, Matrix, Result};

pub const MEL_MAGIC: &[u8; 8] = b"TTTSMEL1";
const MANIFEST_FILE: &str = "corpus.jsonl";
const MEL_DIR: &str = "mels";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header(Header),
    Utterance(UtteranceRecord),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    n_mels: usize,
    noise_std: f64,
    frame_shift_ms: f64,
    frame_length_ms: f64,
    inventory: PhonemeInventory,
    speakers: Vec<Speaker>,
    anchor_speaker_of: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    utt_id: String,
    speaker: String,
    language: String,
    split: Split,
    phonemes: Vec<usize>,
    durations: Vec<usize>,
    f0: Vec<f64>,
    energy: Vec<f64>,
    mel: String,
    frames: usize,
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * mel.frames.len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(mel.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    for &x in mel.frames.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = fs::read(path)?;
    let bad = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MEL_MAGIC {
        return Err(bad("missing mel header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (frames, n_mels) = (word(8), word(12));
    let expected = 16 + 4 * frames * n_mels;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {frames}x{n_mels}, found {}", bytes.len())));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let matrix = Matrix::from_shape_vec((frames, n_mels), values).map_err(|e| bad(e.to_string()))?;
    MelSpectrogram::new(matrix)
}

impl CorpusManifest {
    /// Writes `corpus.jsonl` and `mels/` under `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(MEL_DIR))?;
        let mut out = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
        let header = Record::Header(Header {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            n_mels: self.n_mels,
            noise_std: self.noise_std,
            frame_shift_ms: FRAME_SHIFT_MS,
            frame_length_ms: FRAME_LENGTH_MS,
            inventory: self.inventory.clone(),
            speakers: self.speakers.clone(),
            anchor_speaker_of: self.anchor_speaker_of.clone(),
        });
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for u in &self.utterances {
            let rel = format!("{MEL_DIR}/{}.mel", u.utt_id);
            write_mel(&dir.join(&rel), &u.mel)?;
            let record = Record::Utterance(UtteranceRecord {
                utt_id: u.utt_id.clone(),
                speaker: u.speaker.clone(),
                language: u.language.clone(),
                split: u.split,
                phonemes: u.phonemes.clone(),
                durations: u.durations.clone(),
                f0: u.f0.clone(),
                energy: u.energy.clone(),
                mel: rel,
                frames: u.mel.num_frames(),
            });
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a corpus written by [`CorpusManifest::write`] and validates it.
    pub fn read(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(MANIFEST_FILE);
        let reader = BufReader::new(fs::File::open(&path)?);
        let bad = |line: usize, message: String| Error::Format {
            path: path.clone(),
            message: format!("line {line}: {message}"),
        };
        let mut header: Option<Header> = None;
        let mut utterances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line).map_err(|e| bad(i + 1, e.to_string()))? {
                Record::Header(h) => {
                    if header.is_some() {
                        return Err(bad(i + 1, "second header record".into()));
                    }
                    if h.format_version != FORMAT_VERSION {
                        return Err(bad(i + 1, format!("unsupported format version {}", h.format_version)));
                    }
                    header = Some(h);
                }
                Record::Utterance(r) => {
                    if header.is_none() {
                        return Err(bad(i + 1, "utterance before header".into()));
                    }
                    let mel = read_mel(&dir.join(&r.mel))?;
                    if mel.num_frames() != r.frames {
                        return Err(bad(i + 1, format!("{}: mel has {} frames, record says {}", r.utt_id, mel.num_frames(), r.frames)));
                    }
                    utterances.push(Utterance {
                        utt_id: r.utt_id,
                        phonemes: r.phonemes,
                        language: r.language,
                        speaker: r.speaker,
                        mel,
                        durations: r.durations,
                        f0: r.f0,
                        energy: r.energy,
                        split: r.split,
                    });
                }
            }
        }
        let h = header.ok_or_else(|| bad(0, "no header record".into()))?;
        let manifest = CorpusManifest {
            inventory: h.inventory,
            speakers: h.speakers,
            anchor_speaker_of: h.anchor_speaker_of,
            seed: h.seed,
            n_mels: h.n_mels,
            noise_std: h.noise_std,
            utterances,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_speakers, generate_toy_corpus};

    fn corpus(seed: u64) -> CorpusManifest {
        generate_toy_corpus(3, &PhonemeInventory::toy(12, 6), &default_speakers(), seed, 80).unwrap()
    }

    fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut files = vec![(PathBuf::from(MANIFEST_FILE), fs::read(dir.join(MANIFEST_FILE)).unwrap())];
        let mut mels: Vec<_> = fs::read_dir(dir.join(MEL_DIR)).unwrap().map(|e| e.unwrap().path()).collect();
        mels.sort();
        for p in mels {
            files.push((p.strip_prefix(dir).unwrap().to_owned(), fs::read(&p).unwrap()));
        }
        files
    }

    #[test]
    fn same_seed_writes_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        corpus(7).write(a.path()).unwrap();
        corpus(7).write(b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(5);
        m.write(dir.path()).unwrap();
        assert_eq!(CorpusManifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn mel_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let mel = MelSpectrogram::new(Matrix::from_shape_fn((3, 2), |(r, c)| (r * 2 + c) as f64)).unwrap();
        write_mel(&path, &mel).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 6);
        assert_eq!(&bytes[..8], MEL_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[36..40].try_into().unwrap()), 5.0);
        assert_eq!(read_mel(&path).unwrap(), mel);
    }

    #[test]
    fn truncated_mel_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        write_mel(&path, &MelSpectrogram::new(Matrix::ones((4, 4))).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_mel(&path), Err(Error::Format { .. })));
    }
}
