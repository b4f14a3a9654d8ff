//! Two-stage training loop.
//!
//! Stage I trains every parameter from scratch. Stage II starts from a
//! stage-I checkpoint, freezes the embedding tables and both predictors, and
//! fine-tunes the rest with the triplet loss until its windowed average
//! stops improving.

mod checkpoint;
mod config;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use ttts_tape::{ParamStore, Session};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{default_freeze_prefixes, Stage, TrainConfig};
pub use loss::{acoustic_terms, batch_seed, l1_loss, squared_loss, stage1_loss, stage2_loss, triplet_seed, weighted_total, LossReport, LossWeights, TermVars, TripletRecord};
pub use optim::Adam;

use crate::corpus::{load_batch, CorpusManifest};
use crate::model::Model;
use crate::synth::{F0Domain, SpeakerF0Stats};
use crate::{Error, Result};

/// Names of every parameter under `prefixes`.
///
/// A prefix that matches nothing is a configuration error, so a typo
/// cannot silently leave a module trainable.
pub fn apply_freeze(store: &ParamStore, prefixes: &[String]) -> Result<Vec<String>> {
    let mut frozen = Vec::new();
    for prefix in prefixes {
        let hits: Vec<String> = store.names().filter(|n| n.starts_with(prefix.as_str())).map(String::from).collect();
        if hits.is_empty() {
            return Err(Error::Config(format!("freeze prefix `{prefix}` matches no parameter")));
        }
        frozen.extend(hits);
    }
    frozen.sort();
    frozen.dedup();
    Ok(frozen)
}

/// Relative improvement of the latest `window` values over the `window`
/// before them, or `None` while fewer than two windows exist.
pub fn windowed_improvement(history: &[f64], window: usize) -> Option<f64> {
    if window == 0 || history.len() < 2 * window {
        return None;
    }
    let n = history.len();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let previous = mean(&history[n - 2 * window..n - window]);
    let latest = mean(&history[n - window..]);
    Some(if previous > 0.0 { (previous - latest) / previous } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Converged,
}

pub struct Trainer<'m> {
    manifest: &'m CorpusManifest,
    config: TrainConfig,
    model: Model,
    params: ParamStore,
    adam: Adam,
    step: usize,
    triplet_history: Vec<f64>,
    frozen: Vec<String>,
    f0_stats: Option<BTreeMap<String, SpeakerF0Stats>>,
    registry_hash: String,
}

impl<'m> Trainer<'m> {
    /// A trainer for `config.stage`.
    ///
    /// Stage I starts fresh, or resumes from a stage-I checkpoint. Stage II
    /// requires a checkpoint: a stage-I one starts fine-tuning with a fresh
    /// optimizer, a stage-II one resumes.
    pub fn new(config: TrainConfig, manifest: &'m CorpusManifest, init: Option<Checkpoint>) -> Result<Self> {
        config.validate()?;
        let registry_hash = manifest.registry_hash();
        let model_config = config.model_config(manifest.inventory.len(), manifest.speakers.len(), manifest.n_mels);
        let model = Model::new(model_config)?;
        let (params, adam, step, triplet_history) = match (config.stage, init) {
            (Stage::One, None) => (model.init_params(config.seed), Adam::new(config.lr), 0, Vec::new()),
            (Stage::Two, None) => return Err(Error::Config("stage 2 needs a stage-1 checkpoint".into())),
            (stage, Some(ck)) => {
                if ck.registry_hash != registry_hash {
                    return Err(Error::Load("checkpoint was trained on a different phoneme/speaker registry".into()));
                }
                if ck.model_config != model.config {
                    return Err(Error::Load("checkpoint model dimensions differ from the config".into()));
                }
                model.check_params(&ck.params)?;
                match (stage, ck.stage) {
                    (Stage::Two, Stage::One) => (ck.params, Adam::new(config.lr), 0, Vec::new()),
                    (s, c) if s == c => {
                        let mut adam = ck.adam;
                        adam.lr = config.lr;
                        (ck.params, adam, ck.step, ck.triplet_history)
                    }
                    _ => return Err(Error::Config("cannot go back from a stage-2 checkpoint to stage 1".into())),
                }
            }
        };
        let frozen = match config.stage {
            Stage::One => Vec::new(),
            Stage::Two => apply_freeze(&params, &config.freeze_prefixes)?,
        };
        let f0_stats = if config.dfe_in_triplets {
            let stats = manifest
                .speakers
                .iter()
                .map(|sp| Ok((sp.tag.clone(), SpeakerF0Stats::from_corpus(manifest, &sp.tag, F0Domain::Linear)?)))
                .collect::<Result<_>>()?;
            Some(stats)
        } else {
            None
        };
        Ok(Self {
            manifest,
            config,
            model,
            params,
            adam,
            step,
            triplet_history,
            frozen,
            f0_stats,
            registry_hash,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Every frozen parameter name.
    pub fn frozen_parameters(&self) -> &[String] {
        &self.frozen
    }

    pub fn triplet_history(&self) -> &[f64] {
        &self.triplet_history
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = load_batch(self.manifest, self.config.batch_size, batch_seed(self.config.seed, self.step))?;
        let (grads, report) = {
            let s = Session::with_frozen(&self.params, self.frozen.clone());
            let (total, report) = match self.config.stage {
                Stage::One => stage1_loss(&s, &self.model, self.manifest, &batch, &self.config, self.step)?,
                Stage::Two => stage2_loss(&s, &self.model, self.manifest, &batch, &self.config, self.step, self.f0_stats.as_ref())?,
            };
            let mut g = s.backward(total);
            let grads = s.param_grads(&mut g);
            if let Some((name, _)) = grads.iter().find(|(_, m)| m.iter().any(|x| !x.is_finite())) {
                return Err(Error::Numeric(format!("step {}: non-finite gradient for {name}", self.step)));
            }
            (grads, report)
        };
        self.adam.step(&mut self.params, &grads);
        if let Some(t) = report.triplet(&LossWeights::from_config(&self.config)) {
            self.triplet_history.push(t);
        }
        self.step += 1;
        Ok(report)
    }

    /// Whether the stage-II stopping rule has fired.
    pub fn converged(&self) -> bool {
        self.config.stage == Stage::Two
            && windowed_improvement(&self.triplet_history, self.config.triplet_window)
                .is_some_and(|gain| gain < self.config.triplet_floor)
    }

    /// Trains until `max_steps` or convergence, handing every report to
    /// `on_report`.
    pub fn run(&mut self, mut on_report: impl FnMut(&LossReport) -> Result<()>) -> Result<StopReason> {
        while self.step < self.config.max_steps {
            if self.converged() {
                return Ok(StopReason::Converged);
            }
            let report = self.step()?;
            on_report(&report)?;
        }
        Ok(StopReason::MaxSteps)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.config.stage,
            step: self.step,
            train_config: self.config.clone(),
            model_config: self.model.config.clone(),
            registry_hash: self.registry_hash.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            triplet_history: self.triplet_history.clone(),
        }
    }
}

/// Line-delimited JSON loss log.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    /// Appends to `path`, creating it if needed.
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::options().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, report: &LossReport) -> Result<()> {
        serde_json::to_writer(&mut self.out, report)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_owned(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Runs one stage to completion, optionally logging every step to `log`.
pub fn train(config: TrainConfig, manifest: &CorpusManifest, init: Option<Checkpoint>, log: Option<&Path>) -> Result<(Checkpoint, Vec<LossReport>, StopReason)> {
    let mut trainer = Trainer::new(config, manifest, init)?;
    let mut log = log.map(LossLog::open).transpose()?;
    let mut reports = Vec::new();
    let reason = trainer.run(|r| {
        if let Some(log) = log.as_mut() {
            log.append(r)?;
        }
        reports.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.checkpoint(), reports, reason))
}
