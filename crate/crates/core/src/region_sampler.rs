//! Region-controllable sampling.
//!
//! Cross-attention is first computed against the global prompt; then, for
//! each region, the latent queries are masked to the region, attended
//! against the regional prompt, and the result overwrites the global output
//! at the region's positions. Self-attention is untouched.

use crate::adapter::{encode_prompt, TokenTable};
use crate::error::{Error, Result};
use crate::solvers::DenseMatrix;
use crate::toy_diffusion::network::attention;
use crate::toy_diffusion::{
    sample_reverse_with, AttentionProjections, CrossCondition, ModelWeights, NoiseSchedule, PromptEmbedding, RegionCondition, ToyLatent,
};

/// Binary mask over the latent grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeError(format!(
                "{} mask entries for a {height}x{width} grid",
                bits.len()
            )));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::InvalidConfig("region mask selects no positions".into()));
        }
        Ok(Self { height, width, bits })
    }

    /// Rectangle `[r0, r1) × [c0, c1)`.
    pub fn rect(height: usize, width: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Self> {
        let bits = (0..height * width)
            .map(|i| rows.contains(&(i / width)) && cols.contains(&(i % width)))
            .collect();
        Self::new(height, width, bits)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// A region mask and the prompt that drives it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub mask: RegionMask,
    pub prompt: Vec<String>,
}

/// Key/value source for one cross-attention call: layer `layer` of an
/// encoded prompt.
#[derive(Debug, Clone, Copy)]
pub struct AttentionContext<'a> {
    pub keys_source: &'a PromptEmbedding,
    pub layer: usize,
}

impl<'a> AttentionContext<'a> {
    pub fn new(keys_source: &'a PromptEmbedding, layer: usize) -> Result<Self> {
        if layer >= keys_source.layers() {
            return Err(Error::ShapeError(format!(
                "layer {layer} requested from a {}-layer prompt",
                keys_source.layers()
            )));
        }
        Ok(Self { keys_source, layer })
    }

    fn matrix(&self) -> &'a DenseMatrix {
        self.keys_source.layer(self.layer)
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttentionOutput {
    pub output: DenseMatrix,
    /// Attention weights, one row per query.
    pub probs: DenseMatrix,
}

/// Regions `earlier` and `later` share `positions` latent positions; the
/// later one's features are kept there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapWarning {
    pub earlier: usize,
    pub later: usize,
    pub positions: usize,
}

#[derive(Debug, Clone)]
pub struct RegionAttentionOutput {
    pub output: DenseMatrix,
    pub global_probs: DenseMatrix,
    pub region_probs: Vec<DenseMatrix>,
    pub warnings: Vec<OverlapWarning>,
}

fn check_context(z: &DenseMatrix, ctx: &DenseMatrix, proj: &AttentionProjections<'_>) -> Result<()> {
    proj.check(z.cols(), ctx.cols())?;
    if proj.out.rows() != z.cols() {
        return Err(Error::ShapeError(format!(
            "output projection {:?} does not return to latent width {}",
            proj.out.shape(),
            z.cols()
        )));
    }
    if ctx.rows() == 0 {
        return Err(Error::ShapeError("empty key/value source".into()));
    }
    Ok(())
}

/// `softmax(Q(z)·K(c)ᵀ/√d)·V(c)` followed by the output projection.
pub fn cross_attention(
    z: &DenseMatrix,
    ctx: AttentionContext<'_>,
    proj: AttentionProjections<'_>,
) -> Result<CrossAttentionOutput> {
    let c = ctx.matrix();
    check_context(z, c, &proj)?;
    let cache = attention(z, c, proj, None, &mut None);
    Ok(CrossAttentionOutput {
        output: cache.out,
        probs: cache.probs,
    })
}

/// Pairwise overlaps between masks, in list order.
pub fn overlap_warnings(masks: &[&[bool]]) -> Vec<OverlapWarning> {
    let mut out = Vec::new();
    for later in 0..masks.len() {
        for earlier in 0..later {
            let positions = masks[earlier].iter().zip(masks[later]).filter(|(a, b)| **a && **b).count();
            if positions > 0 {
                out.push(OverlapWarning {
                    earlier,
                    later,
                    positions,
                });
            }
        }
    }
    out
}

/// Region-aware cross-attention on raw key/value sources.
pub(crate) fn region_aware_tokens(
    z: &DenseMatrix,
    global: &DenseMatrix,
    regions: &[(&[bool], &DenseMatrix)],
    proj: AttentionProjections<'_>,
) -> Result<RegionAttentionOutput> {
    check_context(z, global, &proj)?;
    let g = attention(z, global, proj, None, &mut None);
    let mut output = g.out;
    let mut region_probs = Vec::with_capacity(regions.len());
    for (i, (mask, ctx)) in regions.iter().enumerate() {
        if mask.len() != z.rows() {
            return Err(Error::ShapeError(format!(
                "region {i} mask has {} entries for {} latent tokens",
                mask.len(),
                z.rows()
            )));
        }
        check_context(z, ctx, &proj)?;
        let mut zi = z.clone();
        for (r, &inside) in mask.iter().enumerate() {
            if !inside {
                zi.row_mut(r).fill(0.0);
            }
        }
        let hi = attention(&zi, ctx, proj, None, &mut None);
        for (r, &inside) in mask.iter().enumerate() {
            if inside {
                output.row_mut(r).copy_from_slice(hi.out.row(r));
            }
        }
        region_probs.push(hi.probs);
    }
    let masks: Vec<&[bool]> = regions.iter().map(|(m, _)| *m).collect();
    Ok(RegionAttentionOutput {
        output,
        global_probs: g.probs,
        region_probs,
        warnings: overlap_warnings(&masks),
    })
}

/// Global cross-attention with per-region feature replacement; regions are
/// applied in list order so later regions win on overlap.
pub fn region_aware_attention(
    z: &DenseMatrix,
    global_ctx: AttentionContext<'_>,
    regions: &[(&RegionMask, AttentionContext<'_>)],
    proj: AttentionProjections<'_>,
) -> Result<RegionAttentionOutput> {
    let raw: Vec<(&[bool], &DenseMatrix)> = regions.iter().map(|(m, c)| (m.bits(), c.matrix())).collect();
    region_aware_tokens(z, global_ctx.matrix(), &raw, proj)
}

/// Reverse sampling in which every cross-attention call is region-aware.
/// Prompts resolve against the model's token table.
pub fn sample_with_regions(
    weights: &ModelWeights,
    global_prompt: &[String],
    regions: &[RegionSpec],
    schedule: &NoiseSchedule,
    steps: usize,
    rng_seed: u64,
) -> Result<ToyLatent> {
    let table: &TokenTable = &weights.table;
    let blocks = weights.config.blocks;
    let global = encode_prompt(global_prompt, table, blocks)?;
    if regions.is_empty() {
        return sample_reverse_with(weights, CrossCondition::Global(&global), schedule, steps, rng_seed, None);
    }
    let cfg = &weights.config;
    let conds = regions
        .iter()
        .map(|r| {
            if (r.mask.height(), r.mask.width()) != (cfg.latent_h, cfg.latent_w) {
                return Err(Error::ShapeError(format!(
                    "region mask is {}x{}, latent is {}x{}",
                    r.mask.height(),
                    r.mask.width(),
                    cfg.latent_h,
                    cfg.latent_w
                )));
            }
            Ok(RegionCondition {
                mask: r.mask.bits().to_vec(),
                prompt: encode_prompt(&r.prompt, table, blocks)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sample_reverse_with(
        weights,
        CrossCondition::Regional {
            global: &global,
            regions: &conds,
        },
        schedule,
        steps,
        rng_seed,
        None,
    )
}
