//! File formats, dataset ingestion, evaluation and the command-line front
//! end.

mod binary;
pub mod cli;
mod eval;
mod text;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use binary::{
    decode_adapter, decode_model, encode_adapter, encode_model, load_adapter, load_adapter_for, load_model,
    save_adapter, save_model, ADAPTER_MAGIC, ADAPTER_VERSION, MODEL_MAGIC, MODEL_VERSION,
};
pub use eval::{eval_identity, ConceptAlignment, EvalReport, CSV_HEADER, DEFAULT_EVAL_STEPS};
pub use text::{
    format_grid, format_mask, load_dataset, parse_grid, parse_mask, parse_prompt_file, parse_region_arg,
    parse_seeds, read_grid, read_mask, save_dataset, write_grid, MANIFEST_NAME, VALUE_LIMIT,
};

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}
