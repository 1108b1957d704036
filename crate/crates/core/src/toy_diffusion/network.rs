//! Forward pass with cached intermediates and the matching hand-written
//! backward pass.
//!
//! Token matrices are row-major with one token per row, so a linear layer
//! with weight `W (out × in)` maps `X ↦ X·Wᵀ`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::region_sampler;
use crate::solvers::DenseMatrix;
use crate::toy_diffusion::{layer_name, ModelConfig, ModelWeights, PromptEmbedding, ToyLatent};

/// Receives `(input rows, output rows)` for every call of an
/// adapter-targetable linear layer.
pub trait ActivationObserver {
    fn observe(&mut self, layer: &str, input: &DenseMatrix, output: &DenseMatrix);

    /// Called by the reverse sampler before the forward pass of step
    /// `index` (0-based), at timestep `t`.
    fn begin_step(&mut self, _index: usize, _t: usize) {}
}

/// A regional prompt with its mask over latent positions.
#[derive(Debug, Clone)]
pub struct RegionCondition {
    pub mask: Vec<bool>,
    pub prompt: PromptEmbedding,
}

#[derive(Debug, Clone, Copy)]
pub enum CrossCondition<'a> {
    Global(&'a PromptEmbedding),
    Regional {
        global: &'a PromptEmbedding,
        regions: &'a [RegionCondition],
    },
}

impl<'a> CrossCondition<'a> {
    fn global(&self) -> &'a PromptEmbedding {
        match self {
            CrossCondition::Global(p) => p,
            CrossCondition::Regional { global, .. } => global,
        }
    }
}

pub(crate) type Observer<'o> = Option<&'o mut dyn ActivationObserver>;

pub(crate) fn linear(x: &DenseMatrix, w: &DenseMatrix, name: &str, observer: &mut Observer<'_>) -> DenseMatrix {
    let y = x.mul_t_unchecked(w);
    if let Some(obs) = observer.as_deref_mut() {
        obs.observe(name, x, &y);
    }
    y
}

pub(crate) fn softmax_rows(scores: &mut DenseMatrix) {
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Names of the four projections of one attention module.
#[derive(Debug, Clone)]
pub(crate) struct AttnNames {
    pub q: String,
    pub k: String,
    pub v: String,
    pub out: String,
}

impl AttnNames {
    pub fn text() -> Self {
        Self {
            q: layer_name::text("q"),
            k: layer_name::text("k"),
            v: layer_name::text("v"),
            out: layer_name::text("out"),
        }
    }

    pub fn self_attn(b: usize) -> Self {
        Self {
            q: layer_name::self_attn(b, "q"),
            k: layer_name::self_attn(b, "k"),
            v: layer_name::self_attn(b, "v"),
            out: layer_name::self_attn(b, "out"),
        }
    }

    pub fn cross_attn(b: usize) -> Self {
        Self {
            q: layer_name::cross_attn(b, "q"),
            k: layer_name::cross_attn(b, "k"),
            v: layer_name::cross_attn(b, "v"),
            out: layer_name::cross_attn(b, "out"),
        }
    }
}

/// Borrowed projection matrices of one attention module.
#[derive(Debug, Clone, Copy)]
pub struct AttentionProjections<'a> {
    pub q: &'a DenseMatrix,
    pub k: &'a DenseMatrix,
    pub v: &'a DenseMatrix,
    pub out: &'a DenseMatrix,
}

impl<'a> AttentionProjections<'a> {
    pub(crate) fn lookup(weights: &'a ModelWeights, names: &AttnNames) -> Result<Self> {
        Ok(Self {
            q: weights.layer(&names.q)?,
            k: weights.layer(&names.k)?,
            v: weights.layer(&names.v)?,
            out: weights.layer(&names.out)?,
        })
    }

    pub fn check(&self, query_width: usize, source_width: usize) -> Result<usize> {
        let d = self.q.rows();
        let ok = self.q.cols() == query_width
            && self.k.shape() == (d, source_width)
            && self.v.shape() == (d, source_width)
            && self.out.cols() == d
            && d > 0;
        if ok {
            Ok(d)
        } else {
            Err(Error::ShapeError(format!(
                "attention projections q {:?}, k {:?}, v {:?}, out {:?} for query width {query_width}, source width {source_width}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape(),
                self.out.shape()
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    pub q_in: DenseMatrix,
    pub kv_in: DenseMatrix,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub probs: DenseMatrix,
    pub heads: DenseMatrix,
    pub out: DenseMatrix,
}

/// `softmax(Q(q_in)·K(kv_in)ᵀ / √d) · V(kv_in)`, then the output projection.
pub(crate) fn attention(
    q_in: &DenseMatrix,
    kv_in: &DenseMatrix,
    proj: AttentionProjections<'_>,
    names: Option<&AttnNames>,
    observer: &mut Observer<'_>,
) -> AttnCache {
    let mut project = |x: &DenseMatrix, w: &DenseMatrix, pick: fn(&AttnNames) -> &String| match names {
        Some(n) => linear(x, w, pick(n), observer),
        None => x.mul_t_unchecked(w),
    };
    let q = project(q_in, proj.q, |n| &n.q);
    let k = project(kv_in, proj.k, |n| &n.k);
    let v = project(kv_in, proj.v, |n| &n.v);
    let mut probs = q.mul_t_unchecked(&k);
    probs.scale_in_place(1.0 / (q.cols() as f64).sqrt());
    softmax_rows(&mut probs);
    let heads = probs.mul_unchecked(&v);
    let out = project(&heads, proj.out, |n| &n.out);
    AttnCache {
        q_in: q_in.clone(),
        kv_in: kv_in.clone(),
        q,
        k,
        v,
        probs,
        heads,
        out,
    }
}

fn add_grad(grads: &mut BTreeMap<String, DenseMatrix>, name: &str, g: DenseMatrix) {
    match grads.get_mut(name) {
        Some(acc) => acc.axpy(1.0, &g).expect("gradient shapes are fixed"),
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

/// Returns `(d q_in, d kv_in)`.
fn attention_backward(
    cache: &AttnCache,
    proj: AttentionProjections<'_>,
    names: &AttnNames,
    d_out: &DenseMatrix,
    grads: &mut BTreeMap<String, DenseMatrix>,
) -> (DenseMatrix, DenseMatrix) {
    add_grad(grads, &names.out, d_out.t_mul_unchecked(&cache.heads));
    let d_heads = d_out.mul_unchecked(proj.out);
    let d_probs = d_heads.mul_t_unchecked(&cache.v);
    let d_v = cache.probs.t_mul_unchecked(&d_heads);

    let scale = 1.0 / (cache.q.cols() as f64).sqrt();
    let mut d_scores = d_probs;
    for r in 0..d_scores.rows() {
        let p = cache.probs.row(r);
        let row = d_scores.row_mut(r);
        let inner: f64 = row.iter().zip(p).map(|(d, p)| d * p).sum();
        for (d, p) in row.iter_mut().zip(p) {
            *d = p * (*d - inner) * scale;
        }
    }
    let d_q = d_scores.mul_unchecked(&cache.k);
    let d_k = d_scores.t_mul_unchecked(&cache.q);

    add_grad(grads, &names.q, d_q.t_mul_unchecked(&cache.q_in));
    add_grad(grads, &names.k, d_k.t_mul_unchecked(&cache.kv_in));
    add_grad(grads, &names.v, d_v.t_mul_unchecked(&cache.kv_in));
    let d_q_in = d_q.mul_unchecked(proj.q);
    let mut d_kv_in = d_k.mul_unchecked(proj.k);
    d_kv_in.axpy(1.0, &d_v.mul_unchecked(proj.v)).expect("same shape");
    (d_q_in, d_kv_in)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct FfCache {
    input: DenseMatrix,
    pre: DenseMatrix,
    act: DenseMatrix,
}

fn feed_forward(weights: &ModelWeights, b: usize, h: &DenseMatrix, observer: &mut Observer<'_>) -> Result<(DenseMatrix, FfCache)> {
    let n1 = layer_name::ff(b, 1);
    let n2 = layer_name::ff(b, 2);
    let pre = linear(h, weights.layer(&n1)?, &n1, observer);
    let mut act = pre.clone();
    act.values_mut().iter_mut().for_each(|u| *u *= sigmoid(*u));
    let out = linear(&act, weights.layer(&n2)?, &n2, observer);
    Ok((
        out,
        FfCache {
            input: h.clone(),
            pre,
            act,
        },
    ))
}

/// Sinusoidal embedding of the timestep index.
pub(crate) fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = (dim / 2).max(1);
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 100f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        if 2 * i < dim {
            out[2 * i] = arg.sin();
        }
        if 2 * i + 1 < dim {
            out[2 * i + 1] = arg.cos();
        }
    }
    out
}

#[derive(Debug, Clone)]
struct BlockCache {
    self_attn: AttnCache,
    cross_attn: Option<AttnCache>,
    ff: FfCache,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    latent_in: DenseMatrix,
    text: Vec<AttnCache>,
    contexts: Vec<DenseMatrix>,
    blocks: Vec<BlockCache>,
    final_hidden: DenseMatrix,
    /// Predicted noise, one row per latent position.
    pub prediction: DenseMatrix,
}

impl ForwardTrace {
    pub fn prediction_latent(&self, cfg: &ModelConfig) -> ToyLatent {
        ToyLatent::from_tokens(cfg.latent_h, cfg.latent_w, &self.prediction)
    }
}

/// Runs the text encoder for each block: `C_l = E_l + SelfAttn(E_l)`.
pub fn encode_prompt_contexts(
    weights: &ModelWeights,
    prompt: &PromptEmbedding,
    observer: Option<&mut dyn ActivationObserver>,
) -> Result<Vec<DenseMatrix>> {
    let mut observer = observer;
    Ok(encode_contexts(weights, prompt, &mut observer)?.0)
}

fn encode_contexts(
    weights: &ModelWeights,
    prompt: &PromptEmbedding,
    observer: &mut Observer<'_>,
) -> Result<(Vec<DenseMatrix>, Vec<AttnCache>)> {
    let cfg = &weights.config;
    if prompt.layers() != cfg.blocks {
        return Err(Error::ShapeError(format!(
            "prompt has {} layers, model has {} blocks",
            prompt.layers(),
            cfg.blocks
        )));
    }
    if prompt.layer(0).cols() != cfg.d_text {
        return Err(Error::ShapeError(format!(
            "prompt width {} but model text width {}",
            prompt.layer(0).cols(),
            cfg.d_text
        )));
    }
    let names = AttnNames::text();
    let proj = AttentionProjections::lookup(weights, &names)?;
    proj.check(cfg.d_text, cfg.d_text)?;
    let mut contexts = Vec::with_capacity(cfg.blocks);
    let mut caches = Vec::with_capacity(cfg.blocks);
    for e in prompt.per_layer() {
        let cache = attention(e, e, proj, Some(&names), observer);
        let mut c = e.clone();
        c.axpy(1.0, &cache.out)?;
        contexts.push(c);
        caches.push(cache);
    }
    Ok((contexts, caches))
}

/// Noise prediction `ε_θ(z_t, t, c)` with every intermediate kept.
pub fn forward(
    weights: &ModelWeights,
    latent: &ToyLatent,
    t: usize,
    cond: CrossCondition<'_>,
    observer: Option<&mut dyn ActivationObserver>,
) -> Result<ForwardTrace> {
    let mut observer = observer;
    let cfg = &weights.config;
    if !latent.matches_config(cfg) {
        return Err(Error::ShapeError(format!(
            "latent {:?} does not match model latent {}x{}x{}",
            latent.shape(),
            cfg.latent_h,
            cfg.latent_w,
            cfg.channels
        )));
    }
    let (contexts, text) = encode_contexts(weights, cond.global(), &mut observer)?;
    let region_contexts: Vec<Vec<DenseMatrix>> = match cond {
        CrossCondition::Global(_) => Vec::new(),
        CrossCondition::Regional { regions, .. } => regions
            .iter()
            .map(|r| {
                if r.mask.len() != cfg.positions() {
                    return Err(Error::ShapeError(format!(
                        "region mask has {} entries, latent has {} positions",
                        r.mask.len(),
                        cfg.positions()
                    )));
                }
                // Regional prompts reuse the frozen encoder; not recorded.
                Ok(encode_contexts(weights, &r.prompt, &mut None)?.0)
            })
            .collect::<Result<_>>()?,
    };

    let x = latent.to_tokens();
    let mut h = x.mul_t_unchecked(weights.layer(layer_name::IN_PROJ)?);
    h.axpy(1.0, weights.layer(layer_name::POS_EMB)?)?;
    let temb = time_embedding(t, cfg.d_model);
    for r in 0..h.rows() {
        for (v, e) in h.row_mut(r).iter_mut().zip(&temb) {
            *v += e;
        }
    }

    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let self_names = AttnNames::self_attn(b);
        let self_proj = AttentionProjections::lookup(weights, &self_names)?;
        let self_attn = attention(&h, &h, self_proj, Some(&self_names), &mut observer);
        h.axpy(1.0, &self_attn.out)?;

        let cross_names = AttnNames::cross_attn(b);
        let cross_proj = AttentionProjections::lookup(weights, &cross_names)?;
        let cross_attn = match cond {
            CrossCondition::Global(_) => {
                let cache = attention(&h, &contexts[b], cross_proj, Some(&cross_names), &mut observer);
                h.axpy(1.0, &cache.out)?;
                Some(cache)
            }
            CrossCondition::Regional { regions, .. } => {
                let regional: Vec<(&[bool], &DenseMatrix)> = regions
                    .iter()
                    .zip(&region_contexts)
                    .map(|(r, ctx)| (r.mask.as_slice(), &ctx[b]))
                    .collect();
                let out = region_sampler::region_aware_tokens(&h, &contexts[b], &regional, cross_proj)?;
                h.axpy(1.0, &out.output)?;
                None
            }
        };

        let (ff_out, ff) = feed_forward(weights, b, &h, &mut observer)?;
        h.axpy(1.0, &ff_out)?;
        blocks.push(BlockCache {
            self_attn,
            cross_attn,
            ff,
        });
    }

    let prediction = h.mul_t_unchecked(weights.layer(layer_name::OUT_HEAD)?);
    if !prediction.is_finite() {
        return Err(Error::NumericalDivergence(format!("non-finite noise prediction at t = {t}")));
    }
    Ok(ForwardTrace {
        latent_in: x,
        text,
        contexts,
        blocks,
        final_hidden: h,
        prediction,
    })
}

/// Gradients of a scalar loss with respect to every weight matrix and every
/// row of the layer-wise prompt embedding.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub layers: BTreeMap<String, DenseMatrix>,
    pub prompt: Vec<DenseMatrix>,
}

impl Gradients {
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.layers {
            add_grad(&mut self.layers, name, g.clone());
        }
        if self.prompt.is_empty() {
            self.prompt = other.prompt.clone();
        } else {
            for (a, b) in self.prompt.iter_mut().zip(&other.prompt) {
                a.axpy(1.0, b).expect("same prompt shape");
            }
        }
    }
}

/// Backpropagates `d_prediction` (gradient of the loss with respect to the
/// noise prediction) through a traced forward pass.
pub fn backward(weights: &ModelWeights, trace: &ForwardTrace, d_prediction: &DenseMatrix) -> Result<Gradients> {
    let cfg = &weights.config;
    let mut grads = BTreeMap::new();

    add_grad(&mut grads, layer_name::OUT_HEAD, d_prediction.t_mul_unchecked(&trace.final_hidden));
    let mut dh = d_prediction.mul_unchecked(weights.layer(layer_name::OUT_HEAD)?);
    let mut d_contexts: Vec<DenseMatrix> = trace.contexts.iter().map(|c| DenseMatrix::zeros(c.rows(), c.cols())).collect();

    for b in (0..cfg.blocks).rev() {
        let cache = &trace.blocks[b];

        // feed-forward
        let n1 = layer_name::ff(b, 1);
        let n2 = layer_name::ff(b, 2);
        let w2 = weights.layer(&n2)?;
        add_grad(&mut grads, &n2, dh.t_mul_unchecked(&cache.ff.act));
        let mut d_pre = dh.mul_unchecked(w2);
        for (d, &u) in d_pre.values_mut().iter_mut().zip(cache.ff.pre.values()) {
            let s = sigmoid(u);
            *d *= s * (1.0 + u * (1.0 - s));
        }
        add_grad(&mut grads, &n1, d_pre.t_mul_unchecked(&cache.ff.input));
        dh.axpy(1.0, &d_pre.mul_unchecked(weights.layer(&n1)?))?;

        // cross-attention
        let cross = cache
            .cross_attn
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("backward through region-aware attention is not supported".into()))?;
        let cross_names = AttnNames::cross_attn(b);
        let cross_proj = AttentionProjections::lookup(weights, &cross_names)?;
        let (dq_in, dkv_in) = attention_backward(cross, cross_proj, &cross_names, &dh, &mut grads);
        dh.axpy(1.0, &dq_in)?;
        d_contexts[b].axpy(1.0, &dkv_in)?;

        // self-attention
        let self_names = AttnNames::self_attn(b);
        let self_proj = AttentionProjections::lookup(weights, &self_names)?;
        let (dq_in, dkv_in) = attention_backward(&cache.self_attn, self_proj, &self_names, &dh, &mut grads);
        dh.axpy(1.0, &dq_in)?;
        dh.axpy(1.0, &dkv_in)?;
    }

    add_grad(&mut grads, layer_name::POS_EMB, dh.clone());
    add_grad(&mut grads, layer_name::IN_PROJ, dh.t_mul_unchecked(&trace.latent_in));

    let text_names = AttnNames::text();
    let text_proj = AttentionProjections::lookup(weights, &text_names)?;
    let mut d_prompt = Vec::with_capacity(cfg.blocks);
    for (cache, dc) in trace.text.iter().zip(&d_contexts) {
        let (dq_in, dkv_in) = attention_backward(cache, text_proj, &text_names, dc, &mut grads);
        let mut de = dc.clone();
        de.axpy(1.0, &dq_in)?;
        de.axpy(1.0, &dkv_in)?;
        d_prompt.push(de);
    }

    Ok(Gradients {
        layers: grads,
        prompt: d_prompt,
    })
}
