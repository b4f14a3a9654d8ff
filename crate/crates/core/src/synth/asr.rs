//! Contract for an external speech recognizer.
//!
//! No recognizer ships with this crate. A [`Transcriber`] submits a mel and
//! polls for the transcript; [`AsrClient`] adds retries with backoff,
//! transcript normalization and word error rate.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use crate::corpus::MelSpectrogram;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AsrError {
    #[error("transcriber temporarily failed: {0}")]
    Retriable(String),
    #[error("transcriber failed: {0}")]
    Fatal(String),
    #[error("no transcriber registered")]
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JobStatus {
    Pending,
    Done(String),
}

pub trait Transcriber: Send + Sync {
    fn name(&self) -> &str;

    /// Starts a job and returns its id.
    fn submit(&self, mel: &MelSpectrogram) -> Result<String, AsrError>;

    fn poll(&self, job: &str) -> Result<JobStatus, AsrError>;
}

/// Lowercase words with punctuation stripped and whitespace collapsed.
pub fn normalize_transcript(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_alphanumeric() || c == '_' || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Word-level edit distance over reference length, after normalization.
/// An empty reference scores 0 against an empty hypothesis and 1 otherwise.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> f64 {
    let (r, h) = (normalize_transcript(reference), normalize_transcript(hypothesis));
    let r: Vec<&str> = r.split_whitespace().collect();
    let h: Vec<&str> = h.split_whitespace().collect();
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rw) in r.iter().enumerate() {
        let mut cur = vec![i + 1; h.len() + 1];
        for (j, hw) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rw != hw);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[h.len()] as f64 / r.len() as f64
}

pub struct AsrClient {
    transcriber: Box<dyn Transcriber>,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub max_polls: u32,
}

impl AsrClient {
    pub fn new(transcriber: Box<dyn Transcriber>) -> Self {
        Self {
            transcriber,
            max_attempts: 3,
            backoff: Duration::from_millis(200),
            max_polls: 50,
        }
    }

    fn attempt(&self, mel: &MelSpectrogram) -> Result<String, AsrError> {
        let job = self.transcriber.submit(mel)?;
        for _ in 0..self.max_polls {
            match self.transcriber.poll(&job)? {
                JobStatus::Done(text) => return Ok(normalize_transcript(&text)),
                JobStatus::Pending => std::thread::sleep(self.backoff),
            }
        }
        Err(AsrError::Retriable(format!("job {job} still pending")))
    }

    /// Transcript of `mel`, retrying retriable failures with doubling
    /// backoff until the attempt budget runs out.
    pub fn transcribe(&self, mel: &MelSpectrogram) -> Result<String, AsrError> {
        let mut delay = self.backoff;
        let mut last = AsrError::Unavailable;
        for attempt in 0..self.max_attempts.max(1) {
            match self.attempt(mel) {
                Ok(text) => return Ok(text),
                Err(AsrError::Retriable(msg)) => {
                    last = AsrError::Retriable(msg);
                    if attempt + 1 < self.max_attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }

    pub fn word_error_rate(&self, mel: &MelSpectrogram, reference: &str) -> Result<f64, AsrError> {
        Ok(word_error_rate(reference, &self.transcribe(mel)?))
    }
}

/// Transcriber that replays scripted answers; for tests and dry runs.
pub struct ScriptedTranscriber {
    script: Mutex<VecDeque<Result<String, AsrError>>>,
    fallback: String,
}

impl ScriptedTranscriber {
    /// Answers with `script` in order, then `fallback` forever.
    pub fn new(script: Vec<Result<String, AsrError>>, fallback: impl Into<String>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            fallback: fallback.into(),
        }
    }
}

impl Transcriber for ScriptedTranscriber {
    fn name(&self) -> &str {
        "scripted"
    }

    fn submit(&self, _mel: &MelSpectrogram) -> Result<String, AsrError> {
        let next = self.script.lock().expect("script lock").pop_front();
        match next {
            Some(Ok(text)) => Ok(text),
            Some(Err(e)) => Err(e),
            None => Ok(self.fallback.clone()),
        }
    }

    fn poll(&self, job: &str) -> Result<JobStatus, AsrError> {
        Ok(JobStatus::Done(job.to_owned()))
    }
}

type Factory = Box<dyn Fn() -> Box<dyn Transcriber> + Send + Sync>;

/// Transcriber implementations by name.
#[derive(Default)]
pub struct TranscriberRegistry {
    factories: BTreeMap<String, Factory>,
}

impl TranscriberRegistry {
    pub fn register(&mut self, name: impl Into<String>, factory: impl Fn() -> Box<dyn Transcriber> + Send + Sync + 'static) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn client(&self, name: &str) -> Result<AsrClient, AsrError> {
        self.factories
            .get(name)
            .map(|f| AsrClient::new(f()))
            .ok_or(AsrError::Unavailable)
    }
}
