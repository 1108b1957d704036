//! Miniature text-conditioned diffusion denoiser.
//!
//! The network is a token embedding table feeding a one-layer attention text
//! encoder, and a latent branch of `blocks` × {self-attention,
//! cross-attention, feed-forward} with residual connections and a linear
//! output head. Every attention projection and feed-forward matrix is a plain
//! named matrix so adapters can target it.

pub(crate) mod network;
pub mod pretrain;
mod sampling;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::TokenTable;
use crate::error::{Error, Result};
use crate::solvers::DenseMatrix;

pub use network::{
    backward, encode_prompt_contexts, forward, ActivationObserver, AttentionProjections, CrossCondition, ForwardTrace, Gradients,
    RegionCondition,
};
pub(crate) use sampling::loss_and_grad;
pub use sampling::{
    denoise_loss, denoise_loss_with, forward_noise, sample_reverse, sample_reverse_with, timestep_grid, NoiseDraw,
};

/// Architecture constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_h: usize,
    pub latent_w: usize,
    pub channels: usize,
    /// Width of the latent token stream.
    pub d_model: usize,
    /// Width of text embeddings.
    pub d_text: usize,
    /// Attention head width (single head).
    pub head_dim: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    pub num_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_h: 8,
            latent_w: 8,
            channels: 1,
            d_model: 16,
            d_text: 16,
            head_dim: 16,
            blocks: 2,
            ff_hidden: 32,
            num_steps: 50,
        }
    }
}

pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "out"];

impl ModelConfig {
    pub fn positions(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.latent_h > 0
            && self.latent_w > 0
            && self.channels > 0
            && self.d_model > 0
            && self.d_text > 0
            && self.head_dim > 0
            && self.blocks > 0
            && self.ff_hidden > 0
            && self.num_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("all model dimensions must be positive: {self:?}")))
        }
    }

    /// Every adapter-targetable layer with its `(rows, cols)` shape, in a
    /// fixed order.
    pub fn lora_target_layers(&self) -> Vec<(String, (usize, usize))> {
        let (dm, dt, dh, ff) = (self.d_model, self.d_text, self.head_dim, self.ff_hidden);
        let mut out = Vec::new();
        for p in PROJECTIONS {
            let shape = if p == "out" { (dt, dh) } else { (dh, dt) };
            out.push((layer_name::text(p), shape));
        }
        for b in 0..self.blocks {
            for p in PROJECTIONS {
                let shape = if p == "out" { (dm, dh) } else { (dh, dm) };
                out.push((layer_name::self_attn(b, p), shape));
            }
            for p in PROJECTIONS {
                let shape = match p {
                    "q" => (dh, dm),
                    "out" => (dm, dh),
                    _ => (dh, dt),
                };
                out.push((layer_name::cross_attn(b, p), shape));
            }
            out.push((layer_name::ff(b, 1), (ff, dm)));
            out.push((layer_name::ff(b, 2), (dm, ff)));
        }
        out
    }

    /// Non-targetable parameters: input projection, positional table and
    /// output head.
    pub fn frozen_layers(&self) -> Vec<(String, (usize, usize))> {
        vec![
            (layer_name::IN_PROJ.to_string(), (self.d_model, self.channels)),
            (layer_name::POS_EMB.to_string(), (self.positions(), self.d_model)),
            (layer_name::OUT_HEAD.to_string(), (self.channels, self.d_model)),
        ]
    }
}

/// Stable layer names.
pub mod layer_name {
    pub const IN_PROJ: &str = "in_proj";
    pub const POS_EMB: &str = "pos_emb";
    pub const OUT_HEAD: &str = "out_head";
    pub const TEXT_PREFIX: &str = "text.";

    pub fn text(proj: &str) -> String {
        format!("text.attn.{proj}")
    }

    pub fn self_attn(block: usize, proj: &str) -> String {
        format!("block{block}.self.{proj}")
    }

    pub fn cross_attn(block: usize, proj: &str) -> String {
        format!("block{block}.cross.{proj}")
    }

    pub fn ff(block: usize, which: usize) -> String {
        format!("block{block}.ff{which}")
    }

    /// Text-encoder side (as opposed to the denoiser).
    pub fn is_encoder(name: &str) -> bool {
        name.starts_with(TEXT_PREFIX)
    }
}

/// Linear β schedule with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// The 1e-4 → 0.02 DDPM endpoints are calibrated for 1000 steps; this
    /// scales them by `1000 / num_steps` so the terminal ᾱ is near zero for
    /// short schedules too.
    pub fn ddpm_rescaled(num_steps: usize) -> Result<Self> {
        let k = 1000.0 / num_steps.max(1) as f64;
        Self::linear(num_steps, (1e-4 * k).min(0.5), (0.02 * k).min(0.999))
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidConfig("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

/// An `h × w × c` latent grid stored position-major (`(row * w + col) * c + ch`).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLatent {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ToyLatent {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::ShapeError(format!(
                "{} values for a {height}x{width}x{channels} latent",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite latent value".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(cfg: &ModelConfig, value: f64) -> Self {
        Self {
            height: cfg.latent_h,
            width: cfg.latent_w,
            channels: cfg.channels,
            values: vec![value; cfg.positions() * cfg.channels],
        }
    }

    pub fn standard_normal(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DenseMatrix::random_normal(cfg.positions(), cfg.channels, 1.0, &mut rng);
        Self::from_tokens(cfg.latent_h, cfg.latent_w, &m)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + ch]
    }

    pub fn matches_config(&self, cfg: &ModelConfig) -> bool {
        self.shape() == (cfg.latent_h, cfg.latent_w, cfg.channels)
    }

    /// One row per spatial position, one column per channel.
    pub fn to_tokens(&self) -> DenseMatrix {
        DenseMatrix::from_vec_unchecked(self.height * self.width, self.channels, self.values.clone())
    }

    pub fn from_tokens(height: usize, width: usize, tokens: &DenseMatrix) -> Self {
        Self {
            height,
            width,
            channels: tokens.cols(),
            values: tokens.values().to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn rmse(&self, other: &Self) -> f64 {
        let n = self.values.len() as f64;
        (self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }

    pub fn cosine_similarity(&self, other: &Self) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let na: f64 = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return if na == nb { 1.0 } else { 0.0 };
        }
        dot / (na * nb)
    }
}

/// Layer-wise prompt conditioning: one `tokens × d_text` matrix per block.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    per_layer: Vec<DenseMatrix>,
}

impl PromptEmbedding {
    pub fn new(per_layer: Vec<DenseMatrix>) -> Result<Self> {
        let Some(first) = per_layer.first() else {
            return Err(Error::ShapeError("prompt embedding needs at least one layer".into()));
        };
        let shape = first.shape();
        if per_layer.iter().any(|m| m.shape() != shape) {
            return Err(Error::ShapeError("prompt token counts differ across layers".into()));
        }
        Ok(Self { per_layer })
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn tokens(&self) -> usize {
        self.per_layer[0].rows()
    }

    pub fn layer(&self, l: usize) -> &DenseMatrix {
        &self.per_layer[l]
    }

    pub fn per_layer(&self) -> &[DenseMatrix] {
        &self.per_layer
    }
}

/// Pretrained weights plus the token table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: BTreeMap<String, DenseMatrix>,
    pub table: TokenTable,
}

impl ModelWeights {
    /// Random initialization; `vocabulary` entries get `N(0, 1/d_text)` vectors.
    pub fn init(config: ModelConfig, vocabulary: &[&str], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = BTreeMap::new();
        for (name, (rows, cols)) in config.lora_target_layers() {
            let mut std = (1.0 / cols as f64).sqrt();
            if name.ends_with(".out") || name.ends_with(".ff2") {
                std *= 0.5;
            }
            layers.insert(name, DenseMatrix::random_normal(rows, cols, std, &mut rng));
        }
        for (name, (rows, cols)) in config.frozen_layers() {
            let std = match name.as_str() {
                layer_name::IN_PROJ => 1.0,
                layer_name::POS_EMB => 0.5,
                // Near-zero predictions keep an untrained model's loss close to 1.
                layer_name::OUT_HEAD => 0.1 / (cols as f64).sqrt(),
                _ => 0.5 / (cols as f64).sqrt(),
            };
            layers.insert(name, DenseMatrix::random_normal(rows, cols, std, &mut rng));
        }
        let mut table = TokenTable::default();
        let std = 1.0 / (config.d_text as f64).sqrt();
        for word in vocabulary {
            let v = DenseMatrix::random_normal(1, config.d_text, std, &mut rng).into_values();
            table.insert_base(word, v)?;
        }
        Ok(Self { config, layers, table })
    }

    pub fn layer(&self, name: &str) -> Result<&DenseMatrix> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("model has no layer `{name}`")))
    }

    /// 64-bit content hash over config, layer names/values and the base
    /// vocabulary. Concept entries are excluded so adapters stay loadable
    /// on top of a model that already carries other concepts.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let c = &self.config;
        for v in [
            c.latent_h,
            c.latent_w,
            c.channels,
            c.d_model,
            c.d_text,
            c.head_dim,
            c.blocks,
            c.ff_hidden,
            c.num_steps,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for (name, m) in &self.layers {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for (word, v) in self.table.base_entries() {
            h.update((word.len() as u64).to_le_bytes());
            h.update(word.as_bytes());
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::ddpm_rescaled(self.config.num_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::ddpm_rescaled(50).unwrap();
        assert_eq!(s.num_steps(), 50);
        assert!(s.alpha_bars()[0] < 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(*s.alpha_bars().last().unwrap() < 1e-3);
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn layer_names_unique_and_shaped() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(cfg, &["a", "b"], 0).unwrap();
        let targets = cfg.lora_target_layers();
        assert_eq!(targets.len(), 4 + cfg.blocks * 10);
        let mut names: Vec<_> = targets.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), targets.len());
        for (name, shape) in targets.iter().chain(cfg.frozen_layers().iter()) {
            assert_eq!(w.layers[name].shape(), *shape, "{name}");
        }
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let cfg = ModelConfig::default();
        let a = ModelWeights::init(cfg, &["a"], 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.layers.get_mut("block0.ff1").unwrap().values_mut()[0] += 1e-12;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
