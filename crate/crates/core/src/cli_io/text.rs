//! Plain-text inputs: concept datasets, latent grids, region masks, prompt
//! lists and seed ranges.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::adapter::tokenize;
use crate::client_tuning::ConceptDataset;
use crate::error::{Error, Result};
use crate::region_sampler::{RegionMask, RegionSpec};
use crate::toy_diffusion::ToyLatent;

use super::write_atomic;

pub const MANIFEST_NAME: &str = "manifest.toml";
pub const VALUE_LIMIT: f64 = 10.0;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    concept_name: String,
    caption_template: String,
    class_token: String,
    /// Grid files relative to the dataset directory; defaults to every
    /// `*.csv` file, sorted by name.
    images: Option<Vec<String>>,
}

/// Parses one comma-separated grid (one row per line, single channel).
pub fn parse_grid(text: &str, path: &Path) -> Result<ToyLatent> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (j, cell) in line.split(',').enumerate() {
            let err = |detail: String| Error::ParseError {
                path: path.to_path_buf(),
                row: i + 1,
                col: j + 1,
                detail,
            };
            let v: f64 = cell.trim().parse().map_err(|_| err(format!("`{}` is not a number", cell.trim())))?;
            if !(v.abs() <= VALUE_LIMIT) {
                return Err(err(format!("{v} outside [-{VALUE_LIMIT}, {VALUE_LIMIT}]")));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::ShapeInconsistent {
                    path: path.to_path_buf(),
                    detail: format!("line {} has {} values, line 1 has {}", i + 1, row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::ShapeInconsistent {
            path: path.to_path_buf(),
            detail: "empty grid".into(),
        });
    }
    let (h, w) = (rows.len(), rows[0].len());
    ToyLatent::new(h, w, 1, rows.concat())
}

pub fn format_grid(latent: &ToyLatent) -> String {
    let mut out = String::new();
    for r in 0..latent.height() {
        let row: Vec<String> = (0..latent.width())
            .map(|c| format!("{:?}", latent.get(r, c, 0)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_grid(path: &Path) -> Result<ToyLatent> {
    parse_grid(&std::fs::read_to_string(path)?, path)
}

pub fn write_grid(latent: &ToyLatent, path: &Path) -> Result<()> {
    if latent.channels() != 1 {
        return Err(Error::ShapeError("grid files hold a single channel".into()));
    }
    write_atomic(path, format_grid(latent).as_bytes())
}

/// Reads `manifest.toml` and the grid files it names.
pub fn load_dataset(dir: &Path) -> Result<ConceptDataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let manifest: Manifest = toml::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::Format(format!("{}: {}", manifest_path.display(), e.message())))?;
    let files: Vec<PathBuf> = match &manifest.images {
        Some(list) => list.iter().map(|f| dir.join(f)).collect(),
        None => {
            let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            v.sort();
            v
        }
    };
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!("{} lists no images", dir.display())));
    }
    let mut images: Vec<ToyLatent> = Vec::with_capacity(files.len());
    for f in &files {
        let img = read_grid(f)?;
        if let Some(first) = images.first() {
            if first.shape() != img.shape() {
                return Err(Error::ShapeInconsistent {
                    path: f.clone(),
                    detail: format!(
                        "grid is {}x{}, {} is {}x{}",
                        img.height(),
                        img.width(),
                        files[0].display(),
                        first.height(),
                        first.width()
                    ),
                });
            }
        }
        images.push(img);
    }
    Ok(ConceptDataset {
        images,
        caption_template: tokenize(&manifest.caption_template),
        concept_name: manifest.concept_name,
        class_token: manifest.class_token,
    })
}

/// Writes a dataset directory that [`load_dataset`] reads back.
pub fn save_dataset(data: &ConceptDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..data.images.len()).map(|i| format!("image_{i:03}.csv")).collect();
    for (img, name) in data.images.iter().zip(&names) {
        write_grid(img, &dir.join(name))?;
    }
    let quoted: Vec<String> = names.iter().map(|n| format!("{n:?}")).collect();
    let manifest = format!(
        "concept_name = {:?}\ncaption_template = {:?}\nclass_token = {:?}\nimages = [{}]\n",
        data.concept_name,
        data.caption_template.join(" "),
        data.class_token,
        quoted.join(", ")
    );
    write_atomic(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

/// Mask file: a header line `h w`, then whitespace-separated run lengths
/// alternating between 0-runs and 1-runs, starting with 0.
pub fn parse_mask(text: &str, path: &Path) -> Result<RegionMask> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| Error::ParseError {
        path: path.to_path_buf(),
        row: 1,
        col: 1,
        detail: "missing `h w` header".into(),
    })?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |j: usize| -> Result<usize> {
        dims.get(j).and_then(|s| s.parse().ok()).filter(|&d: &usize| d > 0).ok_or_else(|| Error::ParseError {
            path: path.to_path_buf(),
            row: hline + 1,
            col: j + 1,
            detail: "header must be two positive integers `h w`".into(),
        })
    };
    let (h, w) = (parse_dim(0)?, parse_dim(1)?);
    if dims.len() != 2 {
        return Err(Error::ParseError {
            path: path.to_path_buf(),
            row: hline + 1,
            col: 3,
            detail: "header must be two positive integers `h w`".into(),
        });
    }
    let total = h.checked_mul(w).ok_or_else(|| Error::Format("mask too large".into()))?;
    let mut bits = Vec::with_capacity(total);
    let mut value = false;
    for (i, line) in lines {
        for (j, tok) in line.split_whitespace().enumerate() {
            let run: usize = tok.parse().map_err(|_| Error::ParseError {
                path: path.to_path_buf(),
                row: i + 1,
                col: j + 1,
                detail: format!("`{tok}` is not a run length"),
            })?;
            if bits.len() + run > total {
                return Err(Error::ShapeInconsistent {
                    path: path.to_path_buf(),
                    detail: format!("runs exceed the {h}x{w} grid"),
                });
            }
            bits.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
    }
    if bits.len() != total {
        return Err(Error::ShapeInconsistent {
            path: path.to_path_buf(),
            detail: format!("runs cover {} of {total} cells", bits.len()),
        });
    }
    RegionMask::new(h, w, bits)
}

pub fn format_mask(mask: &RegionMask) -> String {
    let mut runs = Vec::new();
    let mut value = false;
    let mut count = 0usize;
    for &b in mask.bits() {
        if b == value {
            count += 1;
        } else {
            runs.push(count);
            value = b;
            count = 1;
        }
    }
    runs.push(count);
    let runs: Vec<String> = runs.iter().map(usize::to_string).collect();
    format!("{} {}\n{}\n", mask.height(), mask.width(), runs.join(" "))
}

pub fn read_mask(path: &Path) -> Result<RegionMask> {
    parse_mask(&std::fs::read_to_string(path)?, path)
}

/// `MASKFILE:PROMPT` from the command line.
pub fn parse_region_arg(arg: &str) -> Result<RegionSpec> {
    let (file, prompt) = arg
        .split_once(':')
        .ok_or_else(|| Error::Format(format!("region `{arg}` is not MASKFILE:PROMPT")))?;
    let prompt = tokenize(prompt);
    if prompt.is_empty() {
        return Err(Error::Format(format!("region `{arg}` has an empty prompt")));
    }
    Ok(RegionSpec {
        mask: read_mask(Path::new(file))?,
        prompt,
    })
}

/// Prompt list: one `CONCEPT: prompt text` per line; blank lines and lines
/// starting with `#` are skipped.
pub fn parse_prompt_file(text: &str, path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (concept, prompt) = line.split_once(':').ok_or_else(|| Error::ParseError {
            path: path.to_path_buf(),
            row: i + 1,
            col: 1,
            detail: "expected `CONCEPT: prompt`".into(),
        })?;
        let prompt = tokenize(prompt);
        if concept.trim().is_empty() || prompt.is_empty() {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                row: i + 1,
                col: 1,
                detail: "empty concept or prompt".into(),
            });
        }
        out.push((concept.trim().to_string(), prompt));
    }
    Ok(out)
}

/// `A..B` (inclusive) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Format(format!("`{s}` is not a seed range `A..B` or list `a,b,c`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b || b - a >= 1_000_000 {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let seeds: Vec<u64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
