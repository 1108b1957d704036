//! Embedding-decomposed LoRA adapters.
//!
//! A concept is a pair of (a) low-rank deltas `ΔW = scale·B·A` on named model
//! layers and (b) a layer-wise two-sub-token embedding: the concept token
//! expands to `[v_rand, v_class]` with separate vectors per block.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client_tuning::TuningConfig;
use crate::error::{Error, Result};
use crate::solvers::DenseMatrix;
use crate::toy_diffusion::{ModelWeights, PromptEmbedding};

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_RAND_SCALE: f64 = 0.02;

/// Low-rank factor pair for one `d × k` linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub target_layer: String,
    /// `d × r`
    pub b: DenseMatrix,
    /// `r × k`
    pub a: DenseMatrix,
    pub scale: f64,
}

impl LoraLayer {
    pub fn new(target_layer: impl Into<String>, b: DenseMatrix, a: DenseMatrix, scale: f64) -> Result<Self> {
        let r = b.cols();
        if a.rows() != r {
            return Err(Error::ShapeError(format!(
                "LoRA B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        if r > b.rows().min(a.cols()) {
            return Err(Error::ShapeError(format!(
                "rank {r} exceeds min({}, {})",
                b.rows(),
                a.cols()
            )));
        }
        if !scale.is_finite() {
            return Err(Error::InvalidConfig("LoRA scale must be finite".into()));
        }
        Ok(Self {
            target_layer: target_layer.into(),
            b,
            a,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// `(d, k)` of the targeted weight.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }
}

/// `scale · B · A`
pub fn merge_delta(layer: &LoraLayer) -> Result<DenseMatrix> {
    Ok(layer.b.matmul(&layer.a)?.scaled(layer.scale))
}

/// The two sub-token vectors of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTokens {
    pub rand: Vec<f64>,
    pub class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedEmbedding {
    pub concept_name: String,
    pub per_layer: Vec<SubTokens>,
}

impl DecomposedEmbedding {
    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn width(&self) -> usize {
        self.per_layer.first().map_or(0, |s| s.rand.len())
    }
}

/// `v_class` copies `class_vector` at every layer; `v_rand` entries are
/// i.i.d. `N(0, rand_scale²)`.
pub fn init_decomposed_embedding(
    concept_name: &str,
    class_vector: &[f64],
    layers: usize,
    rng_seed: u64,
    rand_scale: f64,
) -> Result<DecomposedEmbedding> {
    if !(rand_scale > 0.0) {
        return Err(Error::InvalidConfig(format!("rand_scale must be positive, got {rand_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let per_layer = (0..layers)
        .map(|_| SubTokens {
            rand: DenseMatrix::random_normal(1, class_vector.len(), rand_scale, &mut rng).into_values(),
            class: class_vector.to_vec(),
        })
        .collect();
    Ok(DecomposedEmbedding {
        concept_name: concept_name.to_string(),
        per_layer,
    })
}

/// Ordinary tokens (one vector shared by every layer) plus registered
/// concepts (two vectors per layer).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenTable {
    base: BTreeMap<String, Vec<f64>>,
    concepts: BTreeMap<String, DecomposedEmbedding>,
}

impl TokenTable {
    pub fn insert_base(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if let Some(existing) = self.owner_of(word) {
            return Err(Error::TokenCollision {
                name: word.to_string(),
                existing,
            });
        }
        self.base.insert(word.to_string(), vector);
        Ok(())
    }

    pub fn insert_concept(&mut self, embedding: DecomposedEmbedding) -> Result<()> {
        if let Some(existing) = self.owner_of(&embedding.concept_name) {
            return Err(Error::TokenCollision {
                name: embedding.concept_name.clone(),
                existing,
            });
        }
        self.concepts.insert(embedding.concept_name.clone(), embedding);
        Ok(())
    }

    fn owner_of(&self, name: &str) -> Option<String> {
        if self.base.contains_key(name) {
            Some("the base vocabulary".to_string())
        } else if self.concepts.contains_key(name) {
            Some(format!("concept `{name}`"))
        } else {
            None
        }
    }

    pub fn base(&self, word: &str) -> Option<&[f64]> {
        self.base.get(word).map(Vec::as_slice)
    }

    pub fn concept(&self, name: &str) -> Option<&DecomposedEmbedding> {
        self.concepts.get(name)
    }

    pub fn base_entries(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.base.iter()
    }

    pub fn base_entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Vec<f64>)> {
        self.base.iter_mut()
    }

    pub fn concepts(&self) -> impl Iterator<Item = &DecomposedEmbedding> {
        self.concepts.values()
    }

    pub fn base_len(&self) -> usize {
        self.base.len()
    }

    pub fn concept_len(&self) -> usize {
        self.concepts.len()
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, token: &str) -> bool {
        self.owner_of(token).is_some()
    }

    /// Copy of the table without concept entries.
    pub fn base_only(&self) -> Self {
        Self {
            base: self.base.clone(),
            concepts: BTreeMap::new(),
        }
    }
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_string).collect()
}

/// Rows for one block: ordinary tokens map to their base vector, a concept
/// token expands to `v_rand, v_class` of the requested layer.
pub fn resolve_prompt<S: AsRef<str>>(tokens: &[S], table: &TokenTable, layer: usize) -> Result<DenseMatrix> {
    let mut rows: Vec<&[f64]> = Vec::with_capacity(tokens.len() + 2);
    for tok in tokens {
        let tok = tok.as_ref();
        if let Some(v) = table.base(tok) {
            rows.push(v);
        } else if let Some(c) = table.concept(tok) {
            let sub = c.per_layer.get(layer).ok_or_else(|| {
                Error::ShapeError(format!("concept `{tok}` has {} layers, asked for {layer}", c.layers()))
            })?;
            rows.push(&sub.rand);
            rows.push(&sub.class);
        } else {
            return Err(Error::UnknownToken(tok.to_string()));
        }
    }
    let Some(width) = rows.first().map(|r| r.len()) else {
        return Err(Error::Format("empty prompt".into()));
    };
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::ShapeError("token vectors have different widths".into()));
    }
    let values = rows.concat();
    DenseMatrix::new(rows.len(), width, values)
}

/// Resolves the prompt at every layer.
pub fn encode_prompt<S: AsRef<str>>(tokens: &[S], table: &TokenTable, layers: usize) -> Result<PromptEmbedding> {
    let per_layer = (0..layers)
        .map(|l| resolve_prompt(tokens, table, l))
        .collect::<Result<Vec<_>>>()?;
    PromptEmbedding::new(per_layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMetadata {
    pub base_fingerprint: u64,
    pub caption_template: Vec<String>,
    pub class_token: Option<String>,
    pub tuning: Option<TuningConfig>,
}

/// One client's tuned artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAdapter {
    pub lora_layers: BTreeMap<String, LoraLayer>,
    pub embedding: DecomposedEmbedding,
    pub metadata: AdapterMetadata,
}

impl ConceptAdapter {
    pub fn concept_name(&self) -> &str {
        &self.embedding.concept_name
    }

    /// Fresh adapter on the given layers: `B = 0`, `A ~ N(0, 1/k)`, so the
    /// adapted model starts out identical to the base.
    pub fn zero_init(
        base: &ModelWeights,
        targets: &[String],
        rank: usize,
        embedding: DecomposedEmbedding,
        caption_template: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lora_layers = BTreeMap::new();
        for name in targets {
            let (d, k) = base.layer(name)?.shape();
            let r = rank.min(d).min(k);
            let b = DenseMatrix::zeros(d, r);
            let a = DenseMatrix::random_normal(r, k, 1.0 / (k as f64).sqrt(), &mut rng);
            lora_layers.insert(name.clone(), LoraLayer::new(name.clone(), b, a, 1.0)?);
        }
        Ok(Self {
            lora_layers,
            embedding,
            metadata: AdapterMetadata {
                base_fingerprint: base.fingerprint(),
                caption_template,
                class_token: None,
                tuning: None,
            },
        })
    }

    pub fn check_compatible(&self, base: &ModelWeights) -> Result<()> {
        let fp = base.fingerprint();
        if fp != self.metadata.base_fingerprint {
            return Err(Error::IncompatibleAdapter(format!(
                "adapter `{}` was tuned on base {:016x}, model is {fp:016x}",
                self.concept_name(),
                self.metadata.base_fingerprint
            )));
        }
        for (name, lora) in &self.lora_layers {
            let w = base
                .layers
                .get(name)
                .ok_or_else(|| Error::IncompatibleAdapter(format!("base has no layer `{name}`")))?;
            if w.shape() != lora.target_shape() {
                return Err(Error::IncompatibleAdapter(format!(
                    "layer `{name}` is {:?} in the base but {:?} in the adapter",
                    w.shape(),
                    lora.target_shape()
                )));
            }
        }
        if self.embedding.layers() != base.config.blocks || self.embedding.width() != base.config.d_text {
            return Err(Error::IncompatibleAdapter(format!(
                "embedding is {} layers × {} wide, model wants {} × {}",
                self.embedding.layers(),
                self.embedding.width(),
                base.config.blocks,
                base.config.d_text
            )));
        }
        Ok(())
    }

    /// `ΔW` per targeted layer.
    pub fn deltas(&self) -> Result<BTreeMap<String, DenseMatrix>> {
        self.lora_layers
            .iter()
            .map(|(name, l)| Ok((name.clone(), merge_delta(l)?)))
            .collect()
    }
}

/// `W₀ + ΔW` on every targeted layer, with the concept token registered in
/// the table. Untargeted layers are copied bit-for-bit.
pub fn apply_adapter(base: &ModelWeights, adapter: &ConceptAdapter) -> Result<ModelWeights> {
    adapter.check_compatible(base)?;
    let mut out = base.clone();
    for (name, lora) in &adapter.lora_layers {
        let delta = merge_delta(lora)?;
        out.layers.get_mut(name).expect("checked above").axpy(1.0, &delta)?;
    }
    out.table.insert_concept(adapter.embedding.clone())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::numerical_rank;
    use crate::toy_diffusion::ModelConfig;

    fn base() -> ModelWeights {
        ModelWeights::init(ModelConfig::default(), &["photo", "of", "a", "dog"], 3).unwrap()
    }

    fn random_adapter(base: &ModelWeights, targets: &[&str], seed: u64) -> ConceptAdapter {
        let emb = init_decomposed_embedding("V", base.table.base("dog").unwrap(), 2, seed, 0.02).unwrap();
        let targets: Vec<String> = targets.iter().map(|s| s.to_string()).collect();
        let mut ad = ConceptAdapter::zero_init(base, &targets, 4, emb, tokenize("photo of V"), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in ad.lora_layers.values_mut() {
            l.b = DenseMatrix::random_normal(l.b.rows(), l.b.cols(), 0.1, &mut rng);
        }
        ad
    }

    #[test]
    fn merge_delta_cases() {
        let zero = LoraLayer::new("x", DenseMatrix::zeros(2, 1), DenseMatrix::from_rows(&[&[2.0, 3.0]]), 1.0).unwrap();
        assert_eq!(merge_delta(&zero).unwrap(), DenseMatrix::zeros(2, 2));
        let l = LoraLayer::new(
            "x",
            DenseMatrix::from_rows(&[&[1.0], &[0.0]]),
            DenseMatrix::from_rows(&[&[2.0, 3.0]]),
            1.0,
        )
        .unwrap();
        assert_eq!(merge_delta(&l).unwrap(), DenseMatrix::from_rows(&[&[2.0, 3.0], &[0.0, 0.0]]));
        assert!(LoraLayer::new("x", DenseMatrix::zeros(2, 3), DenseMatrix::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn merged_rank_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = LoraLayer::new(
            "x",
            DenseMatrix::random_normal(16, 4, 1.0, &mut rng),
            DenseMatrix::random_normal(4, 16, 1.0, &mut rng),
            1.0,
        )
        .unwrap();
        assert!(numerical_rank(&merge_delta(&l).unwrap(), 1e-8) <= 4);
    }

    #[test]
    fn apply_touches_only_targets() {
        let base = base();
        let empty = random_adapter(&base, &[], 1);
        assert_eq!(apply_adapter(&base, &empty).unwrap().layers, base.layers);

        let one = random_adapter(&base, &["block1.cross.k"], 2);
        let applied = apply_adapter(&base, &one).unwrap();
        for (name, w) in &base.layers {
            let diff = applied.layers[name].sub(w).unwrap();
            if name == "block1.cross.k" {
                let delta = merge_delta(&one.lora_layers[name]).unwrap();
                assert!(diff.max_abs_diff(&delta).unwrap() < 1e-15);
                assert!(diff.max_abs() > 0.0);
            } else {
                assert_eq!(&applied.layers[name], w, "{name}");
            }
        }
        assert!(applied.table.concept("V").is_some());
    }

    #[test]
    fn apply_rejects_foreign_base() {
        let base = base();
        let ad = random_adapter(&base, &["block0.ff1"], 4);
        let other = ModelWeights::init(ModelConfig::default(), &["photo"], 99).unwrap();
        assert!(matches!(apply_adapter(&other, &ad), Err(Error::IncompatibleAdapter(_))));
    }

    #[test]
    fn scaling_factors_scales_delta() {
        let base = base();
        let ad = random_adapter(&base, &["block0.self.q", "text.attn.v"], 5);
        let mut scaled = ad.clone();
        for l in scaled.lora_layers.values_mut() {
            l.scale *= 2.5;
        }
        let d1 = apply_adapter(&base, &ad).unwrap();
        let d2 = apply_adapter(&base, &scaled).unwrap();
        for name in ad.lora_layers.keys() {
            let a = d1.layers[name].sub(&base.layers[name]).unwrap().scaled(2.5);
            let b = d2.layers[name].sub(&base.layers[name]).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
        }
    }

    #[test]
    fn decomposed_init() {
        let class = vec![0.5, -1.0, 2.0];
        let a = init_decomposed_embedding("V", &class, 2, 1, 1e-12).unwrap();
        let b = init_decomposed_embedding("V", &class, 2, 2, 1e-12).unwrap();
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            assert_eq!(x.class, class);
            assert_eq!(x.class, y.class);
            assert!(x.rand.iter().all(|v| v.abs() < 1e-10));
            assert_ne!(x.rand, y.rand);
        }
        assert!(init_decomposed_embedding("V", &class, 2, 1, 0.0).is_err());
    }

    #[test]
    fn decomposed_init_std_monte_carlo() {
        let class = vec![0.0; 10_000];
        let e = init_decomposed_embedding("V", &class, 1, 7, 0.02).unwrap();
        let v = &e.per_layer[0].rand;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn prompt_resolution() {
        let base = base();
        let mut table = base.table.clone();
        let plain = resolve_prompt(&tokenize("photo of a dog"), &table, 0).unwrap();
        assert_eq!(plain.rows(), 4);
        assert_eq!(plain, resolve_prompt(&tokenize("photo of a dog"), &table, 1).unwrap());

        let emb = init_decomposed_embedding("V", table.base("dog").unwrap(), 2, 1, 0.3).unwrap();
        table.insert_concept(emb.clone()).unwrap();
        let l0 = resolve_prompt(&tokenize("photo of V"), &table, 0).unwrap();
        let l1 = resolve_prompt(&tokenize("photo of V"), &table, 1).unwrap();
        assert_eq!(l0.rows(), 4);
        for r in 0..4 {
            let same = l0.row(r) == l1.row(r);
            assert_eq!(same, r < 2 || r == 3, "row {r}");
        }
        assert_eq!(l0.row(2), emb.per_layer[0].rand.as_slice());
        assert_eq!(l0.row(3), emb.per_layer[0].class.as_slice());
        assert!(matches!(
            resolve_prompt(&tokenize("photo of cat"), &table, 0),
            Err(Error::UnknownToken(t)) if t == "cat"
        ));
    }

    #[test]
    fn table_collisions() {
        let mut t = TokenTable::default();
        t.insert_base("a", vec![1.0]).unwrap();
        let emb = DecomposedEmbedding {
            concept_name: "a".into(),
            per_layer: vec![],
        };
        assert!(matches!(t.insert_concept(emb), Err(Error::TokenCollision { .. })));
    }
}
