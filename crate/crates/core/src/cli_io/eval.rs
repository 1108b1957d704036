//! Identity-preservation evaluation: how closely a fused model reproduces
//! each concept's single-adapter samples.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::{apply_adapter, encode_prompt, ConceptAdapter};
use crate::error::{Error, Result};
use crate::toy_diffusion::{sample_reverse, ModelWeights};

use super::write_atomic;

pub const CSV_HEADER: &str = "concept,alignment_single,alignment_fused,change";
pub const DEFAULT_EVAL_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAlignment {
    pub concept: String,
    pub alignment_single: f64,
    pub alignment_fused: f64,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub concepts: Vec<ConceptAlignment>,
    pub mean_change: f64,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, concepts: Vec<ConceptAlignment>) -> Self {
        let mean_change = if concepts.is_empty() {
            0.0
        } else {
            concepts.iter().map(|c| c.change).sum::<f64>() / concepts.len() as f64
        };
        Self {
            method: method.into(),
            concepts,
            mean_change,
        }
    }

    pub fn get(&self, concept: &str) -> Option<&ConceptAlignment> {
        self.concepts.iter().find(|c| c.concept == concept)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.concepts {
            if c.concept.contains([',', '\n', '\r']) || c.concept.starts_with('#') {
                return Err(Error::Format(format!("concept name `{}` cannot be written to CSV", c.concept)));
            }
            out.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                c.concept, c.alignment_single, c.alignment_fused, c.change
            ));
        }
        out.push_str(&format!("# method={}\n", self.method));
        Ok(out)
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::ParseError {
                    path: path.to_path_buf(),
                    row: 1,
                    col: 1,
                    detail: format!("expected header `{CSV_HEADER}`"),
                })
            }
        }
        let mut method = String::new();
        let mut concepts = Vec::new();
        for (i, line) in lines {
            if let Some(rest) = line.strip_prefix("# method=") {
                method = rest.to_string();
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 {
                return Err(Error::ParseError {
                    path: path.to_path_buf(),
                    row: i + 1,
                    col: cells.len().min(4) + 1,
                    detail: format!("expected 4 columns, found {}", cells.len()),
                });
            }
            let num = |j: usize| -> Result<f64> {
                cells[j].parse().map_err(|_| Error::ParseError {
                    path: path.to_path_buf(),
                    row: i + 1,
                    col: j + 1,
                    detail: format!("`{}` is not a number", cells[j]),
                })
            };
            concepts.push(ConceptAlignment {
                concept: cells[0].to_string(),
                alignment_single: num(1)?,
                alignment_fused: num(2)?,
                change: num(3)?,
            });
        }
        Ok(Self::new(method, concepts))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, path)
    }
}

/// For every concept, the mean cosine similarity between latents sampled
/// from `base` + that concept's adapter and from `fused`, over all of the
/// concept's prompts and all `seeds`, with identical seeds on both sides.
/// The single-model column compares the single-adapter model with itself.
pub fn eval_identity(
    base: &ModelWeights,
    fused: &ModelWeights,
    adapters: &[ConceptAdapter],
    eval_prompts: &BTreeMap<String, Vec<Vec<String>>>,
    seeds: &[u64],
    method: &str,
    steps: usize,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one seed".into()));
    }
    let schedule = fused.schedule()?;
    let mut rows = Vec::with_capacity(adapters.len());
    for adapter in adapters {
        let name = adapter.concept_name();
        let prompts = eval_prompts
            .get(name)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::InvalidConfig(format!("no evaluation prompts for concept `{name}`")))?;
        let single = apply_adapter(base, adapter)?;
        let mut self_sum = 0.0;
        let mut fused_sum = 0.0;
        let mut count = 0usize;
        for prompt in prompts {
            let ps = encode_prompt(prompt, &single.table, single.config.blocks)?;
            let pf = encode_prompt(prompt, &fused.table, fused.config.blocks)?;
            for &seed in seeds {
                let a = sample_reverse(&single, &ps, &schedule, steps, seed)?;
                let b = sample_reverse(fused, &pf, &schedule, steps, seed)?;
                self_sum += a.cosine_similarity(&a);
                fused_sum += a.cosine_similarity(&b);
                count += 1;
            }
        }
        let alignment_single = self_sum / count as f64;
        let alignment_fused = fused_sum / count as f64;
        rows.push(ConceptAlignment {
            concept: name.to_string(),
            alignment_single,
            alignment_fused,
            change: alignment_fused - alignment_single,
        });
    }
    Ok(EvalReport::new(method, rows))
}
