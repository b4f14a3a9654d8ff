#![allow(dead_code)]

use ttts_core::corpus::{default_speakers, generate_toy_corpus, CorpusManifest, PhonemeInventory};
use ttts_core::model::Model;
use ttts_core::trainer::{Stage, TrainConfig};
use ttts_core::Matrix;
use ttts_tape::{ParamStore, Session};

pub fn toy_manifest(per_speaker: usize, n_mels: usize, seed: u64) -> CorpusManifest {
    generate_toy_corpus(per_speaker, &PhonemeInventory::toy(12, 6), &default_speakers(), seed, n_mels).unwrap()
}

/// Smallest inventory the generator accepts, for finite-difference checks.
pub fn micro_manifest(per_speaker: usize, n_mels: usize, seed: u64) -> CorpusManifest {
    generate_toy_corpus(per_speaker, &PhonemeInventory::toy(2, 1), &default_speakers(), seed, n_mels).unwrap()
}

/// Reduced dims that still train in seconds.
pub fn small_config(stage: Stage, seed: u64) -> TrainConfig {
    TrainConfig {
        stage,
        seed,
        lr: 1e-3,
        batch_size: 8,
        phoneme_emb_dim: 8,
        speaker_emb_dim: 4,
        encoder_dim: 8,
        decoder_dim: 8,
        postnet_dim: 4,
        predictor_dim: 4,
        prosody_emb_dim: 4,
        f0_bins: 8,
        energy_bins: 8,
        reference_dim: 4,
        context_dim: 4,
        encoding_dim: 4,
        adversary_dim: 4,
        ..TrainConfig::default()
    }
}

/// Dims of 2 everywhere; a few hundred parameters.
pub fn tiny_config(stage: Stage) -> TrainConfig {
    TrainConfig {
        stage,
        batch_size: 2,
        phoneme_emb_dim: 2,
        speaker_emb_dim: 2,
        encoder_dim: 2,
        decoder_dim: 2,
        postnet_dim: 2,
        predictor_dim: 2,
        prosody_emb_dim: 2,
        f0_bins: 4,
        energy_bins: 4,
        reference_dim: 2,
        context_dim: 2,
        encoding_dim: 2,
        adversary_dim: 2,
        ..TrainConfig::default()
    }
}

pub fn model_for(config: &TrainConfig, manifest: &CorpusManifest) -> Model {
    Model::new(config.model_config(manifest.inventory.len(), manifest.speakers.len(), manifest.n_mels)).unwrap()
}

/// Worst per-entry mismatch between analytic and central-difference
/// gradients over the named parameters.
pub struct GradCheck {
    pub worst: f64,
    pub where_: String,
    pub checked: usize,
}

/// Relative error with an absolute floor below which both gradients count
/// as zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compares analytic gradients of `analytic` against central differences
/// of `numeric`, for every entry of every parameter whose name passes
/// `select`. `numeric` receives the parameter name so a caller can state
/// which objective that parameter's gradient is supposed to descend.
pub fn grad_check(
    store: &ParamStore,
    frozen: &[String],
    analytic: &dyn Fn(&Session) -> ttts_tape::Var,
    numeric: &dyn Fn(&Session, &str) -> f64,
    select: &dyn Fn(&str) -> bool,
) -> GradCheck {
    let grads = {
        let s = Session::with_frozen(store, frozen.to_vec());
        let total = analytic(&s);
        let mut g = s.backward(total);
        s.param_grads(&mut g)
    };
    let eval = |p: &ParamStore, name: &str| numeric(&Session::inference(p), name);
    let h = 1e-6;
    let mut out = GradCheck {
        worst: 0.0,
        where_: String::new(),
        checked: 0,
    };
    let names: Vec<String> = store.names().filter(|n| select(n)).map(String::from).collect();
    for name in names {
        let shape = store.get(&name).unwrap().dim();
        let zero = Matrix::zeros(shape);
        let a = grads.get(&name).unwrap_or(&zero);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = store.clone();
                plus.get_mut(&name).unwrap()[[r, c]] += h;
                let mut minus = store.clone();
                minus.get_mut(&name).unwrap()[[r, c]] -= h;
                let fd = (eval(&plus, &name) - eval(&minus, &name)) / (2.0 * h);
                let err = rel_err(a[[r, c]], fd);
                out.checked += 1;
                if err > out.worst {
                    out.worst = err;
                    out.where_ = format!("{name}[{r},{c}] analytic {} numeric {fd}", a[[r, c]]);
                }
            }
        }
    }
    out
}
