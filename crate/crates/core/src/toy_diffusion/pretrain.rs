//! A synthetic captioned-image world and full-weight training on it, used to
//! produce a base model that already knows a few shape classes.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{encode_prompt, tokenize};
use crate::client_tuning::ConceptDataset;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamSlot};
use crate::toy_diffusion::{backward, loss_and_grad, ModelConfig, ModelWeights, NoiseDraw, ToyLatent};

pub const FILLER_WORDS: [&str; 12] = [
    "photo", "of", "a", "the", "picture", "image", "with", "in", "on", "and", "style", "shape",
];

pub const SHAPE_CLASSES: [&str; 8] = ["square", "circle", "hbar", "vbar", "cross", "diagonal", "frame", "dots"];

pub const CAPTION_TEMPLATES: [&str; 6] = [
    "a photo of a {}",
    "a picture of the {}",
    "the image of a {}",
    "a {} shape",
    "photo of the {} in style",
    "image with a {}",
];

pub const BACKGROUND: f64 = -1.0;
pub const FOREGROUND: f64 = 1.0;

/// Every word the synthetic world uses.
pub fn vocabulary() -> Vec<&'static str> {
    FILLER_WORDS.iter().chain(SHAPE_CLASSES.iter()).copied().collect()
}

/// `template` with `{}` replaced by `word`, split into tokens.
pub fn fill_template(template: &str, word: &str) -> Vec<String> {
    tokenize(&template.replace("{}", word))
}

/// Foreground/background image of `class` with its anchor moved by
/// `(dr, dc)` grid cells.
pub fn shape_image(class: &str, cfg: &ModelConfig, dr: i64, dc: i64) -> Result<ToyLatent> {
    let (h, w) = (cfg.latent_h as i64, cfg.latent_w as i64);
    let (cr, cc) = ((h - 1) as f64 / 2.0 + dr as f64, (w - 1) as f64 / 2.0 + dc as f64);
    let inside = |r: i64, c: i64| -> bool {
        let (fr, fc) = (r as f64, c as f64);
        match class {
            "square" => (fr - cr).abs() <= 1.5 && (fc - cc).abs() <= 1.5,
            "circle" => (fr - cr).powi(2) + (fc - cc).powi(2) <= 2.6f64.powi(2) && (fr - cr).powi(2) + (fc - cc).powi(2) >= 1.2f64.powi(2),
            "hbar" => (fr - cr).abs() <= 0.5,
            "vbar" => (fc - cc).abs() <= 0.5,
            "cross" => ((fr - cr).abs() <= 0.5 && (fc - cc).abs() <= 2.5) || ((fc - cc).abs() <= 0.5 && (fr - cr).abs() <= 2.5),
            "diagonal" => ((r - c) - (dr - dc)).abs() <= 0,
            "frame" => {
                let m = (dr.abs().max(dc.abs())).min(1);
                r == m || c == m || r == h - 1 - m || c == w - 1 - m
            }
            "dots" => (r + dr).rem_euclid(3) == 0 && (c + dc).rem_euclid(3) == 0,
            _ => false,
        }
    };
    if !SHAPE_CLASSES.contains(&class) {
        return Err(Error::UnknownToken(class.to_string()));
    }
    let mut values = Vec::with_capacity((h * w) as usize * cfg.channels);
    for r in 0..h {
        for c in 0..w {
            let v = if inside(r, c) { FOREGROUND } else { BACKGROUND };
            values.extend(std::iter::repeat_n(v, cfg.channels));
        }
    }
    ToyLatent::new(cfg.latent_h, cfg.latent_w, cfg.channels, values)
}

/// A random in-class image, its anchor moved by up to `jitter` cells.
pub fn random_shape_image<R: Rng + ?Sized>(class: &str, cfg: &ModelConfig, jitter: i64, rng: &mut R) -> Result<ToyLatent> {
    shape_image(class, cfg, rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
}

/// The two-concept demo fixture. `V` is an inverted ring introduced as a
/// kind of circle; `W` is a cross drifting sideways. Both are three images.
pub fn demo_concepts(cfg: &ModelConfig) -> Result<Vec<ConceptDataset>> {
    let mut ring = Vec::new();
    let mut cross = Vec::new();
    for i in -1..=1 {
        let mut img = shape_image("circle", cfg, i, 0)?;
        img.values_mut().iter_mut().for_each(|v| *v = -*v);
        ring.push(img);
        cross.push(shape_image("cross", cfg, 0, i)?);
    }
    Ok(vec![
        ConceptDataset {
            images: ring,
            caption_template: tokenize("a photo of V"),
            concept_name: "V".into(),
            class_token: "circle".into(),
        },
        ConceptDataset {
            images: cross,
            caption_template: tokenize("a photo of W"),
            concept_name: "W".into(),
            class_token: "cross".into(),
        },
    ])
}

/// Evaluation prompts for a demo concept.
pub fn demo_eval_prompts(concept: &str) -> Vec<Vec<String>> {
    vec![
        tokenize(&format!("a photo of {concept}")),
        tokenize(&format!("a picture of the {concept}")),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Largest anchor offset of training images.
    pub jitter: i64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 3e-3,
            jitter: 0,
            seed: 0,
        }
    }
}

/// Per-step mean training loss.
#[derive(Debug, Clone, Default)]
pub struct PretrainTrace {
    pub losses: Vec<f64>,
}

/// Initializes a model on [`vocabulary`] and trains every weight and every
/// token vector on random captioned shape images.
pub fn pretrain(config: ModelConfig, cfg: &PretrainConfig) -> Result<(ModelWeights, PretrainTrace)> {
    let mut weights = ModelWeights::init(config, &vocabulary(), cfg.seed)?;
    let trace = train_in_place(&mut weights, cfg)?;
    Ok((weights, trace))
}

/// Continues training on random captioned shape images.
pub fn train_in_place(weights: &mut ModelWeights, cfg: &PretrainConfig) -> Result<PretrainTrace> {
    let config = weights.config;
    train_on(weights, cfg, |rng| {
        let class = *SHAPE_CLASSES.choose(rng).expect("non-empty");
        let template = *CAPTION_TEMPLATES.choose(rng).expect("non-empty");
        Ok((fill_template(template, class), random_shape_image(class, &config, cfg.jitter, rng)?))
    })
}

/// Full-weight training on captioned images drawn by `example`. Every
/// caption word must already be in the model's vocabulary.
pub fn train_on<F>(weights: &mut ModelWeights, cfg: &PretrainConfig, mut example: F) -> Result<PretrainTrace>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<(Vec<String>, ToyLatent)>,
{
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch must be positive".into()));
    }
    let config = weights.config;
    let schedule = weights.schedule()?;
    let adam = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut layer_slots: BTreeMap<String, AdamSlot> =
        weights.layers.iter().map(|(n, m)| (n.clone(), AdamSlot::new(m.values().len()))).collect();
    let mut word_slots: BTreeMap<String, AdamSlot> = weights
        .table
        .base_entries()
        .map(|(w, v)| (w.clone(), AdamSlot::new(v.len())))
        .collect();
    let mut trace = PretrainTrace::default();

    for step in 0..cfg.steps {
        // cosine decay to 10% of the peak rate
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));

        let mut layer_grads: BTreeMap<String, crate::solvers::DenseMatrix> = BTreeMap::new();
        let mut word_grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch {
            let (tokens, image) = example(&mut rng)?;
            let prompt = encode_prompt(&tokens, &weights.table, config.blocks)?;
            let draw = NoiseDraw::sample(&config, &schedule, 0.0, &mut rng);
            let (loss, fwd, d_pred) = loss_and_grad(weights, &image, &prompt, &schedule, &draw)?;
            loss_sum += loss;
            let g = backward(weights, &fwd, &d_pred)?;
            for (name, m) in g.layers {
                match layer_grads.get_mut(&name) {
                    Some(acc) => acc.axpy(1.0, &m)?,
                    None => {
                        layer_grads.insert(name, m);
                    }
                }
            }
            for layer in &g.prompt {
                for (row, tok) in tokens.iter().enumerate() {
                    let acc = word_grads.entry(tok.clone()).or_insert_with(|| vec![0.0; layer.cols()]);
                    acc.iter_mut().zip(layer.row(row)).for_each(|(a, g)| *a += g);
                }
            }
        }
        let n = cfg.batch as f64;
        let t = step as u64 + 1;
        for (name, g) in &layer_grads {
            let grad: Vec<f64> = g.values().iter().map(|v| v / n).collect();
            let w = weights.layers.get_mut(name).expect("gradient for known layer");
            layer_slots
                .get_mut(name)
                .expect("slot per layer")
                .step(w.values_mut(), &grad, lr, t, &adam);
        }
        for (word, v) in weights.table.base_entries_mut() {
            if let Some(g) = word_grads.get(word) {
                let grad: Vec<f64> = g.iter().map(|x| x / n).collect();
                word_slots.get_mut(word).expect("slot per word").step(v, &grad, lr, t, &adam);
            }
        }
        let loss = loss_sum / n;
        if !loss.is_finite() {
            return Err(Error::NumericalDivergence(format!("pretraining loss diverged at step {step}")));
        }
        trace.losses.push(loss);
    }
    Ok(trace)
}
