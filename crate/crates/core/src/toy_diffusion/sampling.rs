use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::toy_diffusion::network::{forward, ActivationObserver, CrossCondition};
use crate::toy_diffusion::{ModelConfig, ModelWeights, NoiseSchedule, PromptEmbedding, ToyLatent};

/// `√ᾱₜ·z0 + √(1−ᾱₜ)·eps`
pub fn forward_noise(z0: &ToyLatent, t: usize, eps: &ToyLatent, schedule: &NoiseSchedule) -> Result<ToyLatent> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeError(format!(
            "latent {:?} vs noise {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if t >= schedule.num_steps() {
        return Err(Error::InvalidConfig(format!(
            "timestep {t} outside schedule of {} steps",
            schedule.num_steps()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (h, w, c) = z0.shape();
    let values = z0.values().iter().zip(eps.values()).map(|(z, e)| a * z + b * e).collect();
    ToyLatent::new(h, w, c, values)
}

/// One training draw: a timestep and the (possibly offset) noise.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: ToyLatent,
}

impl NoiseDraw {
    /// Uniform `t`, standard-normal noise, plus `noise_offset · u` with one
    /// scalar `u ~ N(0, 1)` per sample.
    pub fn sample<R: Rng + ?Sized>(cfg: &ModelConfig, schedule: &NoiseSchedule, noise_offset: f64, rng: &mut R) -> Self {
        let t = rng.random_range(0..schedule.num_steps());
        let n = cfg.positions() * cfg.channels;
        let mut values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let u: f64 = rng.sample(StandardNormal);
        if noise_offset != 0.0 {
            values.iter_mut().for_each(|v| *v += noise_offset * u);
        }
        let eps = ToyLatent::new(cfg.latent_h, cfg.latent_w, cfg.channels, values).expect("finite normals");
        Self { t, eps }
    }
}

/// Mean squared error between the drawn noise and the model's prediction for
/// an explicit draw. Returns `(loss, d loss / d prediction)`.
pub(crate) fn loss_and_grad(
    weights: &ModelWeights,
    z0: &ToyLatent,
    prompt: &PromptEmbedding,
    schedule: &NoiseSchedule,
    draw: &NoiseDraw,
) -> Result<(f64, crate::toy_diffusion::ForwardTrace, crate::solvers::DenseMatrix)> {
    let zt = forward_noise(z0, draw.t, &draw.eps, schedule)?;
    let trace = forward(weights, &zt, draw.t, CrossCondition::Global(prompt), None)?;
    let target = draw.eps.to_tokens();
    let mut diff = trace.prediction.sub(&target)?;
    let n = diff.values().len() as f64;
    let loss = diff.frobenius_norm_sq() / n;
    if !loss.is_finite() {
        return Err(Error::NumericalDivergence("non-finite denoising loss".into()));
    }
    diff.scale_in_place(2.0 / n);
    Ok((loss, trace, diff))
}

/// Denoising loss for an explicit draw.
pub fn denoise_loss_with(
    weights: &ModelWeights,
    z0: &ToyLatent,
    prompt: &PromptEmbedding,
    schedule: &NoiseSchedule,
    draw: &NoiseDraw,
) -> Result<f64> {
    let zt = forward_noise(z0, draw.t, &draw.eps, schedule)?;
    let trace = forward(weights, &zt, draw.t, CrossCondition::Global(prompt), None)?;
    let d = trace.prediction.sub(&draw.eps.to_tokens())?;
    let loss = d.frobenius_norm_sq() / d.values().len() as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalDivergence("non-finite denoising loss".into()));
    }
    Ok(loss)
}

/// `‖eps − ε_θ(z_t, t, c)‖²` averaged over elements, with `t` and `eps`
/// drawn from `rng_seed` (no noise offset).
pub fn denoise_loss(
    weights: &ModelWeights,
    z0: &ToyLatent,
    prompt: &PromptEmbedding,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<f64> {
    if prompt.layers() != weights.config.blocks {
        return Err(Error::ShapeError(format!(
            "prompt has {} layers, model has {} blocks",
            prompt.layers(),
            weights.config.blocks
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let draw = NoiseDraw::sample(&weights.config, schedule, 0.0, &mut rng);
    denoise_loss_with(weights, z0, prompt, schedule, &draw)
}

/// Descending timesteps visited by an `steps`-step sampler: evenly spaced
/// from `T − 1` down to `0`.
pub fn timestep_grid(num_steps: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 {
        return vec![num_steps - 1];
    }
    let steps = steps.min(num_steps);
    (0..steps)
        .map(|i| {
            let frac = (steps - 1 - i) as f64 / (steps - 1) as f64;
            (frac * (num_steps - 1) as f64).round() as usize
        })
        .collect()
}

/// Deterministic DDIM-style reverse process starting from seeded Gaussian
/// noise.
pub fn sample_reverse(
    weights: &ModelWeights,
    prompt: &PromptEmbedding,
    schedule: &NoiseSchedule,
    steps: usize,
    rng_seed: u64,
) -> Result<ToyLatent> {
    sample_reverse_with(weights, CrossCondition::Global(prompt), schedule, steps, rng_seed, None)
}

/// [`sample_reverse`] with an arbitrary cross-attention condition and an
/// optional activation observer.
pub fn sample_reverse_with(
    weights: &ModelWeights,
    cond: CrossCondition<'_>,
    schedule: &NoiseSchedule,
    steps: usize,
    rng_seed: u64,
    mut observer: Option<&mut dyn ActivationObserver>,
) -> Result<ToyLatent> {
    if steps == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one step".into()));
    }
    let cfg = &weights.config;
    let grid = timestep_grid(schedule.num_steps(), steps);
    let mut z = ToyLatent::standard_normal(cfg, rng_seed);
    let mut z0_hat = z.clone();
    for (i, &t) in grid.iter().enumerate() {
        if let Some(obs) = observer.as_deref_mut() {
            obs.begin_step(i, t);
        }
        let obs = observer.as_mut().map(|o| &mut **o as &mut dyn ActivationObserver);
        let trace = forward(weights, &z, t, cond, obs)?;
        let eps_hat = trace.prediction.values();
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((x0, &zt), &e) in z0_hat.values_mut().iter_mut().zip(z.values()).zip(eps_hat) {
            *x0 = (zt - sb * e) / sa;
        }
        if let Some(&t_next) = grid.get(i + 1) {
            let ab_next = schedule.alpha_bar(t_next);
            let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
            for ((zv, &x0), &e) in z.values_mut().iter_mut().zip(z0_hat.values()).zip(eps_hat) {
                *zv = na * x0 + nb * e;
            }
        }
        if !z0_hat.is_finite() || !z.is_finite() {
            return Err(Error::NumericalDivergence(format!("non-finite latent at t = {t}")));
        }
    }
    Ok(z0_hat)
}
