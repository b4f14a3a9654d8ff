use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ttts_core::corpus::{default_speakers, generate_toy_corpus, CorpusManifest, PhonemeInventory};
use ttts_core::model::Model;
use ttts_core::synth::{evaluate, synthesize, write_synthesis, F0Domain, SynthContext, SynthRequest, SystemRegistry, TestSet};
use ttts_core::trainer::{train, Checkpoint, Stage, TrainConfig};

#[derive(Parser)]
#[command(name = "ttts", about = "Two-stage triplet training for cross-lingual TTS on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus tools.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Synthesize one phoneme sequence.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        speaker: String,
        /// Space-separated phoneme symbols.
        #[arg(long)]
        text: String,
        /// base, base_fe or base_fe_dfe; defaults to the plain system of the checkpoint.
        #[arg(long)]
        system: Option<String>,
        #[arg(long, value_enum, default_value_t = Domain::Linear)]
        f0_domain: Domain,
        /// Output mel path; metadata goes next to it as .json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score held-out utterances.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "inter_lan")]
        test_set: String,
        #[arg(long)]
        system: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Domain::Linear)]
        f0_domain: Domain,
        /// Also write the machine-readable report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        utts_per_speaker: usize,
        #[arg(long, default_value_t = 80)]
        n_mels: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Linear,
    Log,
}

impl From<Domain> for F0Domain {
    fn from(d: Domain) -> Self {
        match d {
            Domain::Linear => F0Domain::Linear,
            Domain::Log => F0Domain::Log,
        }
    }
}

fn load_model(checkpoint: &Path, manifest: &CorpusManifest) -> anyhow::Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if ck.registry_hash != manifest.registry_hash() {
        bail!("checkpoint was trained on a different phoneme/speaker registry");
    }
    let model = Model::new(ck.model_config.clone())?;
    Ok((ck, model))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Corpus {
            action: CorpusAction::Generate { seed, out, utts_per_speaker, n_mels },
        } => {
            let manifest = generate_toy_corpus(utts_per_speaker, &PhonemeInventory::toy(12, 6), &default_speakers(), seed, n_mels)?;
            manifest.write(&out)?;
            println!("wrote {} utterances to {}", manifest.utterances.len(), out.display());
        }
        Command::Train { stage, config, init } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.stage = if stage == 1 { Stage::One } else { Stage::Two };
            let manifest = CorpusManifest::read(&cfg.corpus_dir).with_context(|| format!("reading corpus {}", cfg.corpus_dir.display()))?;
            let init = init.map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))).transpose()?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let log = cfg.out_dir.join(format!("stage{stage}_loss.jsonl"));
            let ckpt = cfg.out_dir.join(format!("stage{stage}.ckpt"));
            let (checkpoint, reports, reason) = train(cfg, &manifest, init, Some(&log))?;
            checkpoint.save(&ckpt)?;
            match reports.last() {
                Some(r) => println!("stage {stage}: {} steps, stopped by {reason:?}, final total {:.5}", checkpoint.step, r.total),
                None => println!("stage {stage}: no steps run"),
            }
            println!("checkpoint {}\nloss log {}", ckpt.display(), log.display());
        }
        Command::Synth { checkpoint, corpus, speaker, text, system, f0_domain, out } => {
            let manifest = CorpusManifest::read(&corpus)?;
            let (ck, model) = load_model(&checkpoint, &manifest)?;
            let ctx = SynthContext::new(&model, &ck.params, &manifest, f0_domain.into())?;
            let registry = SystemRegistry::default();
            let system = match &system {
                Some(name) => registry.get(name)?,
                None => registry.default_for(ctx.fe_enabled())?,
            };
            let request = SynthRequest {
                phonemes: manifest.inventory.parse(&text)?,
                speaker,
            };
            let output = synthesize(&ctx, system, &request)?;
            write_synthesis(&output, &out)?;
            println!("{} frames, durations {:?}", output.metadata.frames, output.metadata.durations);
        }
        Command::Eval { checkpoint, corpus, test_set, system, seed, f0_domain, json } => {
            let test_set: TestSet = test_set.parse()?;
            let manifest = CorpusManifest::read(&corpus)?;
            let (ck, model) = load_model(&checkpoint, &manifest)?;
            let ctx = SynthContext::new(&model, &ck.params, &manifest, f0_domain.into())?;
            let registry = SystemRegistry::default();
            let system = match &system {
                Some(name) => registry.get(name)?,
                None => registry.default_for(ctx.fe_enabled())?,
            };
            let report = evaluate(&ctx, system, test_set, seed, None)?;
            print!("{}", report.table());
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
            }
        }
    }
    Ok(())
}
