//! Single-client concept tuning.
//!
//! Only the adapter learns: the decomposed concept embedding, the LoRA
//! factors on text-encoder layers and the LoRA factors on denoiser layers,
//! each with its own learning rate. The base weights are read-only.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{apply_adapter, encode_prompt, init_decomposed_embedding, ConceptAdapter, DEFAULT_RANK};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamSlot};
use crate::toy_diffusion::loss_and_grad;
use crate::toy_diffusion::{
    backward, denoise_loss_with, layer_name, ModelWeights, NoiseDraw, NoiseSchedule, PromptEmbedding, ToyLatent,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    pub images: Vec<ToyLatent>,
    pub caption_template: Vec<String>,
    pub concept_name: String,
    /// Base-vocabulary word whose vector seeds `v_class`.
    pub class_token: String,
}

impl ConceptDataset {
    pub fn validate(&self, base: &ModelWeights) -> Result<usize> {
        if self.images.is_empty() {
            return Err(Error::InvalidConfig("concept dataset has no images".into()));
        }
        if let Some(bad) = self.images.iter().position(|z| !z.matches_config(&base.config)) {
            return Err(Error::ShapeError(format!(
                "image {bad} is {:?}, model latent is {}x{}x{}",
                self.images[bad].shape(),
                base.config.latent_h,
                base.config.latent_w,
                base.config.channels
            )));
        }
        let hits: Vec<usize> = self
            .caption_template
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == self.concept_name)
            .map(|(i, _)| i)
            .collect();
        if hits.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "concept token `{}` must appear exactly once in the caption, found {}",
                self.concept_name,
                hits.len()
            )));
        }
        if base.table.contains(&self.concept_name) {
            return Err(Error::TokenCollision {
                name: self.concept_name.clone(),
                existing: "the base model's table".into(),
            });
        }
        if base.table.base(&self.class_token).is_none() {
            return Err(Error::UnknownToken(self.class_token.clone()));
        }
        for tok in &self.caption_template {
            if *tok != self.concept_name && base.table.base(tok).is_none() {
                return Err(Error::UnknownToken(tok.clone()));
            }
        }
        Ok(hits[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub steps: usize,
    pub lr_embedding: f64,
    pub lr_encoder_lora: f64,
    pub lr_denoiser_lora: f64,
    pub noise_offset: f64,
    pub rank: usize,
    pub rng_seed: u64,
    pub rand_scale: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_embedding: 1e-3,
            lr_encoder_lora: 1e-5,
            lr_denoiser_lora: 1e-4,
            noise_offset: 0.01,
            rank: DEFAULT_RANK,
            rng_seed: 0,
            rand_scale: crate::adapter::DEFAULT_RAND_SCALE,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_embedding, self.lr_encoder_lora, self.lr_denoiser_lora];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(Error::InvalidConfig(format!("learning rates must be non-negative: {lrs:?}")));
        }
        if !(self.noise_offset >= 0.0) {
            return Err(Error::InvalidConfig("noise_offset must be non-negative".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Embedding => self.lr_embedding,
            ParamGroup::EncoderLora => self.lr_encoder_lora,
            ParamGroup::DenoiserLora => self.lr_denoiser_lora,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embedding,
    EncoderLora,
    DenoiserLora,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::EncoderLora => "encoder_lora",
            ParamGroup::DenoiserLora => "denoiser_lora",
        })
    }
}

impl ParamGroup {
    pub fn of_layer(name: &str) -> Self {
        if layer_name::is_encoder(name) {
            ParamGroup::EncoderLora
        } else {
            ParamGroup::DenoiserLora
        }
    }
}

/// `eps + offset·u` with one scalar `u ~ N(0, 1)` drawn from `rng_seed` and
/// broadcast over the whole grid.
pub fn apply_noise_offset(eps: &ToyLatent, offset: f64, rng_seed: u64) -> ToyLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let u: f64 = rng.sample(StandardNormal);
    let mut out = eps.clone();
    if offset != 0.0 {
        out.values_mut().iter_mut().for_each(|v| *v += offset * u);
    }
    out
}

/// Per-step instrumentation from a tuning run.
#[derive(Debug, Clone, Default)]
pub struct TuningTrace {
    pub losses: Vec<f64>,
    /// Exponential moving average of `losses` (factor 0.99).
    pub running_loss: Vec<f64>,
    /// Learning rate each group was stepped with.
    pub group_lr: BTreeMap<ParamGroup, f64>,
    /// Largest absolute parameter change per group on the first step.
    pub first_step_max_update: BTreeMap<ParamGroup, f64>,
}

impl TuningTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_running_loss(&self) -> Option<f64> {
        self.running_loss.last().copied()
    }
}

/// Mean denoising loss of `adapted` on a fixed set of `draws` noise draws per
/// image, seeded by `seed`. Deterministic, so values before and after tuning
/// are directly comparable.
pub fn probe_loss(adapted: &ModelWeights, data: &ConceptDataset, draws: usize, seed: u64) -> Result<f64> {
    let schedule = adapted.schedule()?;
    let prompt = encode_prompt(&data.caption_template, &adapted.table, adapted.config.blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for img in &data.images {
        for _ in 0..draws {
            let draw = NoiseDraw::sample(&adapted.config, &schedule, 0.0, &mut rng);
            total += denoise_loss_with(adapted, img, &prompt, &schedule, &draw)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Adapter at its initialization for this dataset and config.
pub fn initial_adapter(base: &ModelWeights, data: &ConceptDataset, cfg: &TuningConfig) -> Result<ConceptAdapter> {
    data.validate(base)?;
    cfg.validate()?;
    let class_vector = base.table.base(&data.class_token).expect("validated").to_vec();
    let embedding = init_decomposed_embedding(
        &data.concept_name,
        &class_vector,
        base.config.blocks,
        cfg.rng_seed ^ 0x5eed_e111,
        cfg.rand_scale,
    )?;
    let targets: Vec<String> = base.config.lora_target_layers().into_iter().map(|(n, _)| n).collect();
    let mut adapter = ConceptAdapter::zero_init(
        base,
        &targets,
        cfg.rank,
        embedding,
        data.caption_template.clone(),
        cfg.rng_seed ^ 0x10_2a,
    )?;
    adapter.metadata.class_token = Some(data.class_token.clone());
    adapter.metadata.tuning = Some(*cfg);
    Ok(adapter)
}

pub fn tune_concept(base: &ModelWeights, data: &ConceptDataset, cfg: &TuningConfig) -> Result<ConceptAdapter> {
    tune_concept_traced(base, data, cfg).map(|(a, _)| a)
}

/// Tunes one concept and returns the adapter with per-step instrumentation.
pub fn tune_concept_traced(
    base: &ModelWeights,
    data: &ConceptDataset,
    cfg: &TuningConfig,
) -> Result<(ConceptAdapter, TuningTrace)> {
    let concept_pos = data.validate(base)?;
    let mut adapter = initial_adapter(base, data, cfg)?;
    let schedule: NoiseSchedule = base.schedule()?;
    let adam = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    // Rows `concept_pos` and `concept_pos + 1` of every layer's prompt
    // matrix are `v_rand` and `v_class`: tokens before the concept are base
    // words with one row each.
    let mut emb_slots: Vec<(AdamSlot, AdamSlot)> = adapter
        .embedding
        .per_layer
        .iter()
        .map(|s| (AdamSlot::new(s.rand.len()), AdamSlot::new(s.class.len())))
        .collect();
    let mut lora_slots: BTreeMap<String, (AdamSlot, AdamSlot)> = adapter
        .lora_layers
        .iter()
        .map(|(n, l)| {
            (
                n.clone(),
                (AdamSlot::new(l.b.values().len()), AdamSlot::new(l.a.values().len())),
            )
        })
        .collect();

    let mut trace = TuningTrace::default();
    for group in [ParamGroup::Embedding, ParamGroup::EncoderLora, ParamGroup::DenoiserLora] {
        trace.group_lr.insert(group, cfg.lr(group));
    }

    let mut running = 0.0;
    for step in 0..cfg.steps {
        let adapted = apply_adapter(base, &adapter)?;
        let prompt: PromptEmbedding = encode_prompt(&data.caption_template, &adapted.table, base.config.blocks)?;

        let mut loss_sum = 0.0;
        let mut grads = crate::toy_diffusion::Gradients::default();
        for img in &data.images {
            let draw = NoiseDraw::sample(&base.config, &schedule, cfg.noise_offset, &mut rng);
            let (loss, fwd, d_pred) = match loss_and_grad(&adapted, img, &prompt, &schedule, &draw) {
                Ok(v) => v,
                Err(Error::NumericalDivergence(_)) => {
                    return Err(Error::TuningDiverged { step, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            grads.accumulate(&backward(&adapted, &fwd, &d_pred)?);
        }
        let n = data.images.len() as f64;
        let loss = loss_sum / n;
        if !loss.is_finite() {
            return Err(Error::TuningDiverged { step, loss });
        }
        running = if step == 0 { loss } else { 0.99 * running + 0.01 * loss };
        trace.losses.push(loss);
        trace.running_loss.push(running);

        let t = step as u64 + 1;
        let mut max_update: BTreeMap<ParamGroup, f64> = BTreeMap::new();
        let mut note = |g: ParamGroup, u: f64| {
            let e = max_update.entry(g).or_insert(0.0);
            *e = e.max(u);
        };

        let lr_emb = cfg.lr(ParamGroup::Embedding);
        for (l, (sub, (slot_r, slot_c))) in adapter.embedding.per_layer.iter_mut().zip(&mut emb_slots).enumerate() {
            let g = &grads.prompt[l];
            let gr: Vec<f64> = g.row(concept_pos).iter().map(|v| v / n).collect();
            let gc: Vec<f64> = g.row(concept_pos + 1).iter().map(|v| v / n).collect();
            note(ParamGroup::Embedding, slot_r.step(&mut sub.rand, &gr, lr_emb, t, &adam));
            note(ParamGroup::Embedding, slot_c.step(&mut sub.class, &gc, lr_emb, t, &adam));
        }

        for (name, lora) in adapter.lora_layers.iter_mut() {
            let group = ParamGroup::of_layer(name);
            let lr = cfg.lr(group);
            let Some(dw) = grads.layers.get(name) else { continue };
            let dw = dw.scaled(lora.scale / n);
            // W = W₀ + s·B·A  ⇒  ∂L/∂B = s·∂L/∂W·Aᵀ,  ∂L/∂A = s·Bᵀ·∂L/∂W
            let gb = dw.matmul_t(&lora.a)?;
            let ga = lora.b.t_matmul(&dw)?;
            let (slot_b, slot_a) = lora_slots.get_mut(name).expect("slot per layer");
            note(group, slot_b.step(lora.b.values_mut(), gb.values(), lr, t, &adam));
            note(group, slot_a.step(lora.a.values_mut(), ga.values(), lr, t, &adam));
        }
        if step == 0 {
            trace.first_step_max_update = max_update;
        }
    }

    Ok((adapter, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::tokenize;
    use crate::toy_diffusion::ModelConfig;

    fn small_base() -> ModelWeights {
        ModelWeights::init(ModelConfig::default(), &["photo", "of", "a", "thing"], 21).unwrap()
    }

    fn dataset(value: f64) -> ConceptDataset {
        let cfg = ModelConfig::default();
        ConceptDataset {
            images: vec![ToyLatent::filled(&cfg, value)],
            caption_template: tokenize("photo of V"),
            concept_name: "V".into(),
            class_token: "thing".into(),
        }
    }

    #[test]
    fn noise_offset_cases() {
        let cfg = ModelConfig::default();
        let eps = ToyLatent::standard_normal(&cfg, 1);
        assert_eq!(apply_noise_offset(&eps, 0.0, 5), eps);
        let zero = ToyLatent::filled(&cfg, 0.0);
        let shifted = apply_noise_offset(&zero, 1.0, 5);
        let u = shifted.values()[0];
        assert!(u != 0.0);
        assert!(shifted.values().iter().all(|&v| v == u));
    }

    #[test]
    fn noise_offset_grid_mean_variance() {
        // Var(mean of grid) = 1/(h·w) + offset²
        let cfg = ModelConfig::default();
        let offset = 0.3;
        let draws = 10_000;
        let mut means = Vec::with_capacity(draws);
        for s in 0..draws as u64 {
            let eps = ToyLatent::standard_normal(&cfg, 1_000_000 + s);
            means.push(apply_noise_offset(&eps, offset, s).mean());
        }
        let mu = means.iter().sum::<f64>() / draws as f64;
        let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / draws as f64;
        let expected = 1.0 / 64.0 + offset * offset;
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn zero_steps_is_initialization() {
        let base = small_base();
        let data = dataset(0.5);
        let cfg = TuningConfig { steps: 0, ..Default::default() };
        let ad = tune_concept(&base, &data, &cfg).unwrap();
        assert_eq!(ad, initial_adapter(&base, &data, &cfg).unwrap());
        for l in ad.lora_layers.values() {
            assert_eq!(l.b.max_abs(), 0.0);
        }
        let adapted = apply_adapter(&base, &ad).unwrap();
        assert_eq!(adapted.layers, base.layers);
    }

    #[test]
    fn groups_get_their_learning_rates() {
        let base = small_base();
        let before = base.clone();
        let cfg = TuningConfig { steps: 1, ..Default::default() };
        let (_, trace) = tune_concept_traced(&base, &dataset(0.5), &cfg).unwrap();
        assert_eq!(base, before);
        for (group, lr) in [
            (ParamGroup::Embedding, 1e-3),
            (ParamGroup::EncoderLora, 1e-5),
            (ParamGroup::DenoiserLora, 1e-4),
        ] {
            assert_eq!(trace.group_lr[&group], lr);
            // Adam's first step moves every coordinate with a non-negligible
            // gradient by exactly lr.
            let u = trace.first_step_max_update[&group];
            assert!((u / lr - 1.0).abs() < 1e-3, "{group}: {u}");
        }
    }

    #[test]
    fn deterministic_and_base_immutable() {
        let base = small_base();
        let before = base.clone();
        let cfg = TuningConfig { steps: 3, ..Default::default() };
        let a = tune_concept(&base, &dataset(0.5), &cfg).unwrap();
        let b = tune_concept(&base, &dataset(0.5), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(base, before);
    }

    #[test]
    fn rejects_bad_datasets() {
        let base = small_base();
        let mut d = dataset(0.0);
        d.caption_template = tokenize("photo of V V");
        assert!(tune_concept(&base, &d, &TuningConfig::default()).is_err());
        let mut d = dataset(0.0);
        d.images.clear();
        assert!(tune_concept(&base, &d, &TuningConfig::default()).is_err());
        let mut d = dataset(0.0);
        d.caption_template = tokenize("picture of V");
        assert!(matches!(
            tune_concept(&base, &d, &TuningConfig::default()),
            Err(Error::UnknownToken(_))
        ));
    }
}
