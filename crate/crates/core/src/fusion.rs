//! Merging several concept adapters into one model.
//!
//! Weight fusion averages the deltas. Gradient fusion instead fits each
//! targeted layer so that, on activations recorded while sampling every
//! concept with its own adapter, the fused layer reproduces each concept's
//! adapted outputs as closely as possible in the least-squares sense.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{apply_adapter, encode_prompt, ConceptAdapter, DecomposedEmbedding, TokenTable};
use crate::error::{Error, Result};
use crate::solvers::{
    condition_number, gram_factor, lbfgs_minimize, solve_min_norm_factored, DenseMatrix, LbfgsConfig, QuadraticObjective,
};
use crate::toy_diffusion::{layer_name, sample_reverse_with, ActivationObserver, CrossCondition, ModelWeights, NoiseSchedule};

/// Per-concept layer inputs (`k × N`, one column per activation) and the
/// outputs the concept's adapted layer produced for them (`d × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub concept_id: String,
    pub per_layer: BTreeMap<String, DenseMatrix>,
    pub per_layer_targets: BTreeMap<String, DenseMatrix>,
}

impl ActivationBatch {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in &self.per_layer {
            let y = self
                .per_layer_targets
                .get(name)
                .ok_or_else(|| Error::ShapeError(format!("no recorded outputs for `{name}`")))?;
            if x.cols() != y.cols() {
                return Err(Error::ShapeError(format!(
                    "`{name}`: {} input columns but {} output columns",
                    x.cols(),
                    y.cols()
                )));
            }
        }
        if self.per_layer.len() != self.per_layer_targets.len() {
            return Err(Error::ShapeError("input and output layer sets differ".into()));
        }
        Ok(())
    }

    /// Number of recorded activations for `layer`.
    pub fn count(&self, layer: &str) -> usize {
        self.per_layer.get(layer).map_or(0, |x| x.cols())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    ClosedForm,
    Iterative,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" | "closed_form" => Ok(SolverKind::ClosedForm),
            "iterative" => Ok(SolverKind::Iterative),
            other => Err(Error::InvalidConfig(format!("unknown solver mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Weight,
    Gradient,
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Weight => "weight",
            FusionMethod::Gradient => "gradient",
        })
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(FusionMethod::Weight),
            "gradient" => Ok(FusionMethod::Gradient),
            other => Err(Error::InvalidConfig(format!("unknown fusion method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub method: FusionMethod,
    pub solver_kind: Option<SolverKind>,
    pub concepts: Vec<String>,
    /// Fusion weights used by weight fusion; empty for gradient fusion.
    pub weights: Vec<f64>,
    /// `Σᵢ ‖Yᵢ − W·Xᵢ‖²_F` per layer at the fused weight.
    pub per_layer_residual: BTreeMap<String, f64>,
    /// Each concept's part of the total residual.
    pub per_concept_share: BTreeMap<String, f64>,
    pub iterations_used: BTreeMap<String, usize>,
}

impl FusionReport {
    pub fn total_residual(&self) -> f64 {
        self.per_layer_residual.values().sum()
    }
}

/// `[1/n; n]`
pub fn equal_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_adapters(base: &ModelWeights, adapters: &[ConceptAdapter]) -> Result<()> {
    if adapters.is_empty() {
        return Err(Error::EmptyFusion);
    }
    for a in adapters {
        a.check_compatible(base)?;
    }
    Ok(())
}

/// Adds every concept embedding to `base_table`.
pub fn merge_embedding_tables(base_table: &TokenTable, embeddings: &[DecomposedEmbedding]) -> Result<TokenTable> {
    let mut table = base_table.clone();
    for e in embeddings {
        table.insert_concept(e.clone())?;
    }
    Ok(table)
}

fn merged_table(base: &ModelWeights, adapters: &[ConceptAdapter]) -> Result<TokenTable> {
    let embeddings: Vec<DecomposedEmbedding> = adapters.iter().map(|a| a.embedding.clone()).collect();
    merge_embedding_tables(&base.table, &embeddings)
}

/// `W₀ + Σ wᵢ·ΔWᵢ` on every targeted layer, all concept tokens registered.
pub fn weight_fuse(base: &ModelWeights, adapters: &[ConceptAdapter], weights: &[f64]) -> Result<ModelWeights> {
    check_adapters(base, adapters)?;
    if weights.len() != adapters.len() {
        return Err(Error::InvalidConfig(format!(
            "{} fusion weights for {} adapters",
            weights.len(),
            adapters.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if !((sum - 1.0).abs() <= 1e-9) {
        return Err(Error::WeightNormalizationError(sum));
    }
    let mut out = base.clone();
    for (adapter, &w) in adapters.iter().zip(weights) {
        for (name, delta) in adapter.deltas()? {
            out.layers.get_mut(&name).expect("checked compatible").axpy(w, &delta)?;
        }
    }
    out.table = merged_table(base, adapters)?;
    Ok(out)
}

/// Weight fusion plus its report (fusion weights echoed).
pub fn weight_fuse_model(
    base: &ModelWeights,
    adapters: &[ConceptAdapter],
    weights: Option<&[f64]>,
) -> Result<(ModelWeights, FusionReport)> {
    let weights = weights.map_or_else(|| equal_weights(adapters.len()), <[f64]>::to_vec);
    let fused = weight_fuse(base, adapters, &weights)?;
    let report = FusionReport {
        method: FusionMethod::Weight,
        solver_kind: None,
        concepts: adapters.iter().map(|a| a.concept_name().to_string()).collect(),
        weights,
        per_layer_residual: BTreeMap::new(),
        per_concept_share: BTreeMap::new(),
        iterations_used: BTreeMap::new(),
    };
    Ok((fused, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureConfig {
    pub samples_per_prompt: usize,
    pub steps: usize,
    /// Record every `stride`-th denoising step.
    pub stride: usize,
    pub rng_seed: u64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 4,
            steps: 10,
            stride: 1,
            rng_seed: 0,
        }
    }
}

const CAPTURE_TEMPLATES: [&str; 6] = [
    "a photo of {}",
    "a picture of {}",
    "the image of {}",
    "{} in style",
    "photo of the {}",
    "image with {}",
];

/// The adapter's caption plus up to three caption variations whose words
/// all exist in `table`.
pub fn default_capture_prompts(adapter: &ConceptAdapter, table: &TokenTable) -> Vec<Vec<String>> {
    let name = adapter.concept_name();
    let mut prompts = vec![adapter.metadata.caption_template.clone()];
    for t in CAPTURE_TEMPLATES {
        if prompts.len() == 4 {
            break;
        }
        let tokens: Vec<String> = t.replace("{}", name).split_whitespace().map(str::to_string).collect();
        let known = tokens.iter().all(|w| w == name || table.contains(w));
        if known && !prompts.contains(&tokens) {
            prompts.push(tokens);
        }
    }
    prompts
}

struct Recorder<'a> {
    targets: &'a BTreeSet<String>,
    stride: usize,
    active: bool,
    inputs: BTreeMap<String, Vec<f64>>,
    outputs: BTreeMap<String, Vec<f64>>,
}

impl ActivationObserver for Recorder<'_> {
    fn begin_step(&mut self, index: usize, _t: usize) {
        self.active = index.is_multiple_of(self.stride);
    }

    fn observe(&mut self, layer: &str, input: &DenseMatrix, output: &DenseMatrix) {
        if !self.active || !self.targets.contains(layer) {
            return;
        }
        self.inputs.entry(layer.to_string()).or_default().extend_from_slice(input.values());
        self.outputs.entry(layer.to_string()).or_default().extend_from_slice(output.values());
    }
}

/// Samples every prompt `samples_per_prompt` times with the adapter applied
/// and records each targeted layer's inputs and outputs at every recorded
/// denoising step.
pub fn capture_activations(
    base: &ModelWeights,
    adapter: &ConceptAdapter,
    prompts: &[Vec<String>],
    schedule: &NoiseSchedule,
    cfg: &CaptureConfig,
) -> Result<ActivationBatch> {
    if cfg.samples_per_prompt == 0 || cfg.stride == 0 || cfg.steps == 0 {
        return Err(Error::InvalidConfig(
            "samples_per_prompt, steps and stride must be positive".into(),
        ));
    }
    if prompts.is_empty() {
        return Err(Error::InvalidConfig("no capture prompts".into()));
    }
    let adapted = apply_adapter(base, adapter)?;
    let targets: BTreeSet<String> = adapter.lora_layers.keys().cloned().collect();
    let mut rec = Recorder {
        targets: &targets,
        stride: cfg.stride,
        active: true,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    for prompt in prompts {
        let emb = encode_prompt(prompt, &adapted.table, adapted.config.blocks)?;
        for _ in 0..cfg.samples_per_prompt {
            let seed: u64 = seeds.random();
            rec.active = true;
            sample_reverse_with(&adapted, CrossCondition::Global(&emb), schedule, cfg.steps, seed, Some(&mut rec))?;
        }
    }

    let mut per_layer = BTreeMap::new();
    let mut per_layer_targets = BTreeMap::new();
    for name in &targets {
        let (d, k) = adapted.layer(name)?.shape();
        let xs = rec.inputs.remove(name).unwrap_or_default();
        let ys = rec.outputs.remove(name).unwrap_or_default();
        let n = xs.len() / k;
        // Rows were appended token by token; transpose to one column each.
        per_layer.insert(name.clone(), DenseMatrix::new(n, k, xs)?.transpose());
        per_layer_targets.insert(name.clone(), DenseMatrix::new(n, d, ys)?.transpose());
    }
    Ok(ActivationBatch {
        concept_id: adapter.concept_name().to_string(),
        per_layer,
        per_layer_targets,
    })
}

/// Result of fusing one layer.
#[derive(Debug, Clone)]
pub struct LayerFusion {
    pub weight: DenseMatrix,
    /// `Σᵢ ‖(W₀+ΔWᵢ)Xᵢ − W·Xᵢ‖²_F` at the returned weight.
    pub objective: f64,
    pub iterations: usize,
    pub gram_condition: f64,
}

/// The fusion objective of one layer as a quadratic in `W − W₀`.
pub fn layer_objective(deltas: &[DenseMatrix], activations: &[DenseMatrix]) -> Result<QuadraticObjective> {
    if deltas.is_empty() {
        return Err(Error::EmptyFusion);
    }
    if deltas.len() != activations.len() {
        return Err(Error::ShapeError(format!(
            "{} deltas but {} activation sets",
            deltas.len(),
            activations.len()
        )));
    }
    let (d, k) = deltas[0].shape();
    let mut gram = DenseMatrix::zeros(k, k);
    let mut cross = DenseMatrix::zeros(d, k);
    let mut constant = 0.0;
    for (i, (dw, x)) in deltas.iter().zip(activations).enumerate() {
        if dw.shape() != (d, k) || x.rows() != k {
            return Err(Error::ShapeError(format!(
                "concept {i}: delta {:?} and activations {:?} for a {d}x{k} layer",
                dw.shape(),
                x.shape()
            )));
        }
        let g = x.matmul_t(x)?;
        let dg = dw.matmul(&g)?;
        constant += dg.dot(dw)?;
        cross.axpy(1.0, &dg)?;
        gram.axpy(1.0, &g)?;
    }
    // Round-off can leave the accumulated Gram a hair off symmetric.
    let sym = gram.add(&gram.transpose())?.scaled(0.5);
    QuadraticObjective::new(sym, cross, constant)
}

/// Least-squares fusion of one layer, returning the fused weight.
pub fn gradient_fuse_layer(
    w0: &DenseMatrix,
    deltas: &[DenseMatrix],
    activations: &[DenseMatrix],
    mode: SolverKind,
    iters: usize,
) -> Result<DenseMatrix> {
    gradient_fuse_layer_detailed(w0, deltas, activations, mode, iters).map(|f| f.weight)
}

pub fn gradient_fuse_layer_detailed(
    w0: &DenseMatrix,
    deltas: &[DenseMatrix],
    activations: &[DenseMatrix],
    mode: SolverKind,
    iters: usize,
) -> Result<LayerFusion> {
    let objective = layer_objective(deltas, activations)?;
    if deltas[0].shape() != w0.shape() {
        return Err(Error::ShapeError(format!(
            "deltas are {:?} but the layer is {:?}",
            deltas[0].shape(),
            w0.shape()
        )));
    }
    let gram_condition = condition_number(objective.gram());
    let (weight, iterations) = match mode {
        SolverKind::ClosedForm => {
            // C·G⁺ from per-concept Gram factors: same minimizer, but without
            // squaring the conditioning of the activations.
            let factors = activations.iter().map(gram_factor).collect::<Result<Vec<_>>>()?;
            let mut w = w0.clone();
            w.axpy(1.0, &solve_min_norm_factored(&factors, deltas)?)?;
            (w, 0)
        }
        SolverKind::Iterative => {
            let f = |w: &DenseMatrix| objective.value(&w.sub(w0).expect("same shape"));
            let g = |w: &DenseMatrix| objective.gradient(&w.sub(w0).expect("same shape"));
            let out = lbfgs_minimize(f, g, w0, &LbfgsConfig::with_steps(iters))?;
            (out.x, out.iterations)
        }
    };
    let value = objective.value(&weight.sub(w0)?).max(0.0);
    Ok(LayerFusion {
        weight,
        objective: value,
        iterations,
        gram_condition,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientFusionConfig {
    pub mode: SolverKind,
    /// Iterative steps for text-encoder layers.
    pub encoder_iters: usize,
    /// Iterative steps for denoiser layers.
    pub denoiser_iters: usize,
}

impl Default for GradientFusionConfig {
    fn default() -> Self {
        Self {
            mode: SolverKind::ClosedForm,
            encoder_iters: 500,
            denoiser_iters: 50,
        }
    }
}

/// `‖Y − W·X‖²_F`
fn residual(w: &DenseMatrix, x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    let mut r = w.matmul(x)?;
    r.axpy(-1.0, y)?;
    Ok(r.frobenius_norm_sq())
}

/// Gradient fusion of every targeted layer; layers no adapter targets are
/// copied bit-for-bit.
pub fn gradient_fuse_model(
    base: &ModelWeights,
    adapters: &[ConceptAdapter],
    batches: &[ActivationBatch],
    cfg: &GradientFusionConfig,
) -> Result<(ModelWeights, FusionReport)> {
    check_adapters(base, adapters)?;
    if batches.len() != adapters.len() {
        return Err(Error::InvalidConfig(format!(
            "{} activation batches for {} adapters",
            batches.len(),
            adapters.len()
        )));
    }
    let deltas: Vec<BTreeMap<String, DenseMatrix>> = adapters.iter().map(|a| a.deltas()).collect::<Result<_>>()?;
    let mut layers: BTreeSet<String> = BTreeSet::new();
    for (a, b) in adapters.iter().zip(batches) {
        b.validate()?;
        if b.concept_id != a.concept_name() {
            return Err(Error::InvalidConfig(format!(
                "batch for `{}` paired with adapter `{}`",
                b.concept_id,
                a.concept_name()
            )));
        }
        layers.extend(a.lora_layers.keys().cloned());
    }

    let mut fused = base.clone();
    let mut report = FusionReport {
        method: FusionMethod::Gradient,
        solver_kind: Some(cfg.mode),
        concepts: adapters.iter().map(|a| a.concept_name().to_string()).collect(),
        weights: Vec::new(),
        per_layer_residual: BTreeMap::new(),
        per_concept_share: report_zeros(adapters),
        iterations_used: BTreeMap::new(),
    };

    for name in &layers {
        let w0 = base.layer(name)?;
        let mut ds = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut owners = Vec::new();
        for (i, batch) in batches.iter().enumerate() {
            let Some(x) = batch.per_layer.get(name) else { continue };
            let delta = deltas[i].get(name).cloned().unwrap_or_else(|| DenseMatrix::zeros(w0.rows(), w0.cols()));
            ds.push(delta);
            xs.push(x.clone());
            ys.push(batch.per_layer_targets[name].clone());
            owners.push(i);
        }
        if ds.is_empty() {
            return Err(Error::InvalidConfig(format!("no activations captured for `{name}`")));
        }
        let iters = if layer_name::is_encoder(name) {
            cfg.encoder_iters
        } else {
            cfg.denoiser_iters
        };
        let lf = gradient_fuse_layer_detailed(w0, &ds, &xs, cfg.mode, iters)?;
        let mut layer_total = 0.0;
        for ((x, y), &i) in xs.iter().zip(&ys).zip(&owners) {
            let r = residual(&lf.weight, x, y)?;
            layer_total += r;
            *report.per_concept_share.get_mut(adapters[i].concept_name()).expect("seeded") += r;
        }
        report.per_layer_residual.insert(name.clone(), layer_total);
        report.iterations_used.insert(name.clone(), lf.iterations);
        *fused.layers.get_mut(name).expect("checked compatible") = lf.weight;
    }
    fused.table = merged_table(base, adapters)?;
    Ok((fused, report))
}

fn report_zeros(adapters: &[ConceptAdapter]) -> BTreeMap<String, f64> {
    adapters.iter().map(|a| (a.concept_name().to_string(), 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_decomposed_embedding, tokenize};
    use crate::solvers::numerical_rank;
    use crate::toy_diffusion::ModelConfig;

    fn rand(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        DenseMatrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn base() -> ModelWeights {
        ModelWeights::init(ModelConfig::default(), &["photo", "of", "a", "the", "dog", "cat"], 3).unwrap()
    }

    fn adapter(base: &ModelWeights, name: &str, class: &str, seed: u64) -> ConceptAdapter {
        let emb = init_decomposed_embedding(name, base.table.base(class).unwrap(), 2, seed, 0.02).unwrap();
        let targets: Vec<String> = base.config.lora_target_layers().into_iter().map(|(n, _)| n).collect();
        let mut ad =
            ConceptAdapter::zero_init(base, &targets, 4, emb, tokenize(&format!("photo of {name}")), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in ad.lora_layers.values_mut() {
            l.b = DenseMatrix::random_normal(l.b.rows(), l.b.cols(), 0.1, &mut rng);
        }
        ad
    }

    #[test]
    fn weight_fuse_single_is_apply() {
        let b = base();
        let a = adapter(&b, "V", "dog", 1);
        assert_eq!(weight_fuse(&b, std::slice::from_ref(&a), &[1.0]).unwrap(), apply_adapter(&b, &a).unwrap());
    }

    #[test]
    fn weight_fuse_hand_arithmetic() {
        let b = base();
        let mut a1 = adapter(&b, "V", "dog", 1);
        let mut a2 = adapter(&b, "W", "cat", 2);
        a1.lora_layers.retain(|n, _| n == "block0.ff1");
        a2.lora_layers.retain(|n, _| n == "block0.ff1");
        let (d1, d2) = (
            a1.deltas().unwrap()["block0.ff1"].clone(),
            a2.deltas().unwrap()["block0.ff1"].clone(),
        );
        let fused = weight_fuse(&b, &[a1, a2], &[0.3, 0.7]).unwrap();
        let w0 = &b.layers["block0.ff1"];
        let got = &fused.layers["block0.ff1"];
        for i in 0..w0.values().len() {
            let expect = w0.values()[i] + 0.3 * d1.values()[i] + 0.7 * d2.values()[i];
            assert!((got.values()[i] - expect).abs() < 1e-15);
        }
        assert_eq!(fused.layers["block1.ff1"], b.layers["block1.ff1"]);
        assert!(fused.table.contains("V") && fused.table.contains("W"));
    }

    #[test]
    fn weight_fuse_rejects_unnormalized() {
        let b = base();
        let a = adapter(&b, "V", "dog", 1);
        let c = adapter(&b, "W", "dog", 2);
        assert!(matches!(
            weight_fuse(&b, &[a, c], &[0.5, 0.6]),
            Err(Error::WeightNormalizationError(_))
        ));
    }

    #[test]
    fn single_full_rank_recovers_adapted_weight() {
        let w0 = rand(4, 5, 1);
        let dw = rand(4, 5, 2);
        let x = rand(5, 12, 3);
        let w = gradient_fuse_layer(&w0, std::slice::from_ref(&dw), &[x], SolverKind::ClosedForm, 0).unwrap();
        assert!(w.max_abs_diff(&w0.add(&dw).unwrap()).unwrap() < 1e-8);
    }

    #[test]
    fn shared_delta_is_fixed_point() {
        let w0 = rand(3, 4, 1);
        let dw = rand(3, 4, 2);
        let xs = [rand(4, 2, 3), rand(4, 3, 4)];
        let w = gradient_fuse_layer(&w0, &[dw.clone(), dw.clone()], &xs, SolverKind::ClosedForm, 0).unwrap();
        // combined Gram has rank 4, so the shared minimizer is unique
        assert!(w.max_abs_diff(&w0.add(&dw).unwrap()).unwrap() < 1e-8);
    }

    /// Explicit normal equations on a 4×4 system, solved by Gaussian
    /// elimination independent of the SVD path.
    #[test]
    fn orthogonal_subspaces_are_reproduced_separately() {
        let w0 = rand(4, 4, 10);
        let d1 = rand(4, 4, 11);
        let d2 = rand(4, 4, 12);
        // X1 spans e0, e1; X2 spans e2, e3 (after a rotation).
        let q = {
            let m = rand(4, 4, 13).to_faer();
            DenseMatrix::from_faer(m.qr().compute_thin_Q().as_ref())
        };
        let basis = |cols: &[usize]| {
            let mut out = DenseMatrix::zeros(4, cols.len() * 2);
            let mut rng = ChaCha8Rng::seed_from_u64(cols[0] as u64 + 50);
            for j in 0..out.cols() {
                let c1: f64 = rng.random_range(-1.0..1.0);
                let c2: f64 = rng.random_range(-1.0..1.0);
                for r in 0..4 {
                    out.set(r, j, c1 * q.get(r, cols[0]) + c2 * q.get(r, cols[1]));
                }
            }
            out
        };
        let x1 = basis(&[0, 1]);
        let x2 = basis(&[2, 3]);
        let w = gradient_fuse_layer(&w0, &[d1.clone(), d2.clone()], &[x1.clone(), x2.clone()], SolverKind::ClosedForm, 0)
            .unwrap();

        // oracle: solve (W−W₀)·G = C row by row via Gaussian elimination
        let g = x1.matmul_t(&x1).unwrap().add(&x2.matmul_t(&x2).unwrap()).unwrap();
        let c = d1
            .matmul(&x1.matmul_t(&x1).unwrap())
            .unwrap()
            .add(&d2.matmul(&x2.matmul_t(&x2).unwrap()).unwrap())
            .unwrap();
        let mut oracle = w0.clone();
        for row in 0..4 {
            // G symmetric: solve G·dᵀ = cᵀ
            let mut a: Vec<Vec<f64>> = (0..4)
                .map(|i| {
                    let mut r = g.row(i).to_vec();
                    r.push(c.get(row, i));
                    r
                })
                .collect();
            for col in 0..4 {
                let p = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
                a.swap(col, p);
                for r in 0..4 {
                    if r != col {
                        let f = a[r][col] / a[col][col];
                        for k in col..5 {
                            a[r][k] -= f * a[col][k];
                        }
                    }
                }
            }
            for i in 0..4 {
                oracle.set(row, i, oracle.get(row, i) + a[i][4] / a[i][i]);
            }
        }
        assert!(w.max_abs_diff(&oracle).unwrap() < 1e-8);
        for (x, d) in [(&x1, &d1), (&x2, &d2)] {
            let want = w0.add(d).unwrap().matmul(x).unwrap();
            assert!(w.matmul(x).unwrap().max_abs_diff(&want).unwrap() < 1e-8);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let w0 = rand(2, 2, 1);
        assert!(matches!(
            gradient_fuse_layer(&w0, &[], &[], SolverKind::ClosedForm, 0),
            Err(Error::EmptyFusion)
        ));
        assert!(matches!(
            gradient_fuse_layer(&w0, &[rand(2, 2, 2)], &[rand(3, 4, 3)], SolverKind::ClosedForm, 0),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn capture_counts_and_definition() {
        let b = base();
        let a = adapter(&b, "V", "dog", 1);
        let schedule = b.schedule().unwrap();
        let one = CaptureConfig {
            samples_per_prompt: 1,
            steps: 1,
            stride: 1,
            rng_seed: 4,
        };
        let prompt = vec![tokenize("photo of V")];
        let batch = capture_activations(&b, &a, &prompt, &schedule, &one).unwrap();
        let cfg = &b.config;
        // "photo of V" expands to 4 text tokens; text layers run once per block
        assert_eq!(batch.count("text.attn.q"), 4 * cfg.blocks);
        assert_eq!(batch.count("block0.self.q"), cfg.positions());
        assert_eq!(batch.count("block1.cross.k"), 4);
        assert_eq!(batch.count("block1.cross.q"), cfg.positions());

        let adapted = apply_adapter(&b, &a).unwrap();
        for (name, x) in &batch.per_layer {
            let y = &batch.per_layer_targets[name];
            let want = adapted.layers[name].matmul(x).unwrap();
            assert!(y.max_abs_diff(&want).unwrap() < 1e-10, "{name}");
        }

        let two = CaptureConfig {
            samples_per_prompt: 2,
            ..one
        };
        let doubled = capture_activations(&b, &a, &prompt, &schedule, &two).unwrap();
        for name in batch.per_layer.keys() {
            assert_eq!(doubled.count(name), 2 * batch.count(name));
        }
        let strided = CaptureConfig {
            steps: 4,
            stride: 2,
            ..one
        };
        let s = capture_activations(&b, &a, &prompt, &schedule, &strided).unwrap();
        assert_eq!(s.count("block0.ff2"), 2 * cfg.positions());
    }

    #[test]
    fn model_fusion_accounting_and_untouched_layers() {
        let b = base();
        let adapters: Vec<ConceptAdapter> = ["V", "W", "U"]
            .iter()
            .enumerate()
            .map(|(i, n)| adapter(&b, n, "dog", i as u64 + 1))
            .collect();
        let schedule = b.schedule().unwrap();
        let cap = CaptureConfig {
            samples_per_prompt: 1,
            steps: 2,
            stride: 1,
            rng_seed: 1,
        };
        let batches: Vec<ActivationBatch> = adapters
            .iter()
            .map(|a| capture_activations(&b, a, &default_capture_prompts(a, &b.table), &schedule, &cap).unwrap())
            .collect();
        let (fused, report) = gradient_fuse_model(&b, &adapters, &batches, &GradientFusionConfig::default()).unwrap();
        assert_eq!(report.per_concept_share.len(), 3);
        let shares: f64 = report.per_concept_share.values().sum();
        assert!((shares - report.total_residual()).abs() <= 1e-8 * (1.0 + shares.abs()));
        assert!(report.per_layer_residual.values().all(|&r| r >= 0.0));
        for (name, _) in b.config.frozen_layers() {
            assert_eq!(fused.layers[&name], b.layers[&name]);
        }
        for a in &adapters {
            for (name, d) in a.deltas().unwrap() {
                assert!(numerical_rank(&d, 1e-8) <= 4);
                let _ = name;
            }
        }
    }

    #[test]
    fn merge_tables() {
        let b = base();
        let e1 = init_decomposed_embedding("V", &[0.0; 16], 2, 1, 0.02).unwrap();
        let e2 = init_decomposed_embedding("W", &[0.0; 16], 2, 2, 0.02).unwrap();
        assert_eq!(merge_embedding_tables(&b.table, &[]).unwrap(), b.table);
        let t = merge_embedding_tables(&b.table, &[e1.clone(), e2]).unwrap();
        assert_eq!(t.len(), b.table.len() + 2);
        assert!(matches!(
            merge_embedding_tables(&b.table, &[e1.clone(), e1]),
            Err(Error::TokenCollision { .. })
        ));
    }
}
