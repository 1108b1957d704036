//! Little-endian binary containers for adapters and models.
//!
//! Adapter file layout:
//!
//! ```text
//! "EDLR" | u32 version | u64 base fingerprint
//! u32 layer count, then per layer:
//!     str name | u32 d | u32 r | u32 k | f64[d·r] B | f64[r·k] A | f64 scale
//! str concept name | u32 layers | u32 width, then per layer:
//!     f64[width] v_rand | f64[width] v_class
//! str metadata (JSON)
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8. Model files use the same
//! primitives under the `"EDMW"` magic.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::{AdapterMetadata, ConceptAdapter, DecomposedEmbedding, LoraLayer, SubTokens, TokenTable};
use crate::error::{Error, Result};
use crate::solvers::DenseMatrix;
use crate::toy_diffusion::{ModelConfig, ModelWeights};

use super::write_atomic;

pub const ADAPTER_MAGIC: &[u8; 4] = b"EDLR";
pub const ADAPTER_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"EDMW";
pub const MODEL_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in 32 bits")))?;
        self.u32(v);
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn matrix(&mut self, m: &DenseMatrix) -> Result<()> {
        self.len(m.rows())?;
        self.len(m.cols())?;
        self.f64s(m.values());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::TruncatedFile(format!(
                "{}: needed {n} bytes at offset {}, {} remain",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{}: string is not UTF-8", self.what)))
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        DenseMatrix::new(rows, cols, self.f64s(n)?)
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let found = self.take(4).map_err(|_| Error::BadMagic(self.what.to_string()))?;
        if found != magic {
            return Err(Error::BadMagic(self.what.to_string()));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::VersionMismatch {
                found: v,
                expected: version,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_embedding(w: &mut Writer, e: &DecomposedEmbedding) -> Result<()> {
    w.str(&e.concept_name)?;
    w.len(e.layers())?;
    w.len(e.width())?;
    for s in &e.per_layer {
        if s.rand.len() != e.width() || s.class.len() != e.width() {
            return Err(Error::ShapeError(format!("ragged embedding for `{}`", e.concept_name)));
        }
        w.f64s(&s.rand);
        w.f64s(&s.class);
    }
    Ok(())
}

fn read_embedding(r: &mut Reader<'_>) -> Result<DecomposedEmbedding> {
    let concept_name = r.str()?;
    let layers = r.len()?;
    let width = r.len()?;
    let mut per_layer = Vec::new();
    for _ in 0..layers {
        let rand = r.f64s(width)?;
        let class = r.f64s(width)?;
        if rand.iter().chain(&class).any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!("non-finite embedding value for `{concept_name}`")));
        }
        per_layer.push(SubTokens { rand, class });
    }
    Ok(DecomposedEmbedding {
        concept_name,
        per_layer,
    })
}

pub fn encode_adapter(adapter: &ConceptAdapter) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(ADAPTER_MAGIC);
    w.u32(ADAPTER_VERSION);
    w.u64(adapter.metadata.base_fingerprint);
    w.len(adapter.lora_layers.len())?;
    for (name, l) in &adapter.lora_layers {
        w.str(name)?;
        w.len(l.b.rows())?;
        w.len(l.rank())?;
        w.len(l.a.cols())?;
        w.f64s(l.b.values());
        w.f64s(l.a.values());
        w.f64(l.scale);
    }
    write_embedding(&mut w, &adapter.embedding)?;
    let meta = serde_json::to_string(&adapter.metadata).map_err(|e| Error::Format(e.to_string()))?;
    w.str(&meta)?;
    Ok(w.buf)
}

pub fn decode_adapter(bytes: &[u8], what: &str) -> Result<ConceptAdapter> {
    let mut r = Reader::new(bytes, what);
    r.header(ADAPTER_MAGIC, ADAPTER_VERSION)?;
    let fingerprint = r.u64()?;
    let count = r.len()?;
    let mut lora_layers = BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?;
        let d = r.len()?;
        let rank = r.len()?;
        let k = r.len()?;
        let size = |a: usize, b: usize| a.checked_mul(b).ok_or_else(|| Error::Format("layer size overflow".into()));
        let b = DenseMatrix::new(d, rank, r.f64s(size(d, rank)?)?)?;
        let a = DenseMatrix::new(rank, k, r.f64s(size(rank, k)?)?)?;
        let scale = r.f64()?;
        if !scale.is_finite() {
            return Err(Error::InvalidMatrix(format!("non-finite scale on `{name}`")));
        }
        lora_layers.insert(name.clone(), LoraLayer::new(name, b, a, scale)?);
    }
    let embedding = read_embedding(&mut r)?;
    let meta = r.str()?;
    r.finish()?;
    let metadata: AdapterMetadata =
        serde_json::from_str(&meta).map_err(|e| Error::Format(format!("{what}: metadata: {e}")))?;
    if metadata.base_fingerprint != fingerprint {
        return Err(Error::FingerprintMismatch {
            found: metadata.base_fingerprint,
            expected: fingerprint,
        });
    }
    Ok(ConceptAdapter {
        lora_layers,
        embedding,
        metadata,
    })
}

pub fn save_adapter(adapter: &ConceptAdapter, path: &Path) -> Result<()> {
    write_atomic(path, &encode_adapter(adapter)?)
}

/// Reads an adapter without checking it against a base model.
pub fn load_adapter(path: &Path) -> Result<ConceptAdapter> {
    let bytes = std::fs::read(path)?;
    decode_adapter(&bytes, &path.display().to_string())
}

/// Reads an adapter and verifies it was tuned on `base`.
pub fn load_adapter_for(path: &Path, base: &ModelWeights) -> Result<ConceptAdapter> {
    let adapter = load_adapter(path)?;
    let expected = base.fingerprint();
    if adapter.metadata.base_fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            found: adapter.metadata.base_fingerprint,
            expected,
        });
    }
    adapter.check_compatible(base)?;
    Ok(adapter)
}

/// Model file: header, config (JSON), stored fingerprint, layers, base
/// vocabulary, concept embeddings.
pub fn encode_model(model: &ModelWeights) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    let cfg = serde_json::to_string(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    w.str(&cfg)?;
    w.u64(model.fingerprint());
    w.len(model.layers.len())?;
    for (name, m) in &model.layers {
        w.str(name)?;
        w.matrix(m)?;
    }
    w.len(model.table.base_len())?;
    for (word, v) in model.table.base_entries() {
        w.str(word)?;
        w.len(v.len())?;
        w.f64s(v);
    }
    w.len(model.table.concept_len())?;
    for e in model.table.concepts() {
        write_embedding(&mut w, e)?;
    }
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8], what: &str) -> Result<ModelWeights> {
    let mut r = Reader::new(bytes, what);
    r.header(MODEL_MAGIC, MODEL_VERSION)?;
    let config: ModelConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("{what}: config: {e}")))?;
    config.validate()?;
    let stored = r.u64()?;
    let mut layers = BTreeMap::new();
    for _ in 0..r.len()? {
        let name = r.str()?;
        let m = r.matrix()?;
        layers.insert(name, m);
    }
    let mut table = TokenTable::default();
    for _ in 0..r.len()? {
        let word = r.str()?;
        let n = r.len()?;
        let v = r.f64s(n)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix(format!("non-finite vector for `{word}`")));
        }
        table.insert_base(&word, v)?;
    }
    for _ in 0..r.len()? {
        table.insert_concept(read_embedding(&mut r)?)?;
    }
    r.finish()?;
    for (name, shape) in config.lora_target_layers().into_iter().chain(config.frozen_layers()) {
        match layers.get(&name) {
            Some(m) if m.shape() == shape => {}
            Some(m) => {
                return Err(Error::ShapeError(format!(
                    "{what}: layer `{name}` is {:?}, config wants {shape:?}",
                    m.shape()
                )))
            }
            None => return Err(Error::Format(format!("{what}: missing layer `{name}`"))),
        }
    }
    let model = ModelWeights { config, layers, table };
    let found = model.fingerprint();
    if found != stored {
        return Err(Error::FingerprintMismatch { found, expected: stored });
    }
    Ok(model)
}

pub fn save_model(model: &ModelWeights, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes, &path.display().to_string())
}
