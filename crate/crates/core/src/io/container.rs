//! Tensor container shared by model bundles and exported analysis tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes  magic "DJTENSOR"
//! offset 8   u64      manifest length N
//! offset 16  N bytes  UTF-8 JSON manifest
//! 16 + N     payload  raw IEEE-754 f32 values, row-major, per manifest offsets
//! ```
//!
//! The manifest lists every tensor with a payload-relative `byte_offset`,
//! and carries the 64-bit FNV-1a hash of the payload as 16 lowercase hex
//! digits. JSON keys are written in a fixed order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerWeights, ModelBundle, ModelConfig};
use crate::scalar::{cast_vec, Scalar};

pub const MAGIC: &[u8; 8] = b"DJTENSOR";
pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.write(bytes);
        h.finish()
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
    pub checksum: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn vector<T: Scalar>(name: impl Into<String>, v: &[T]) -> Self {
        Self { name: name.into(), shape: vec![v.len()], data: cast_vec(v) }
    }

    pub fn matrix<T: Scalar>(name: impl Into<String>, m: &Matrix<T>) -> Self {
        Self { name: name.into(), shape: vec![m.rows(), m.cols()], data: cast_vec(m.as_slice()) }
    }

    pub fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, cast_vec(&self.data)),
            other => Err(Error::Shape(format!("{}: expected a matrix, found shape {other:?}", self.name))),
        }
    }
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub config: Option<ModelConfig>,
    pub tensors: Vec<NamedTensor>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
        if t.shape != shape {
            return Err(Error::Shape(format!("{name}: manifest shape {:?}, config implies {shape:?}", t.shape)));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("{}: {} values for shape {:?}", t.name, t.data.len(), t.shape)));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                byte_offset: payload.len() as u64,
            });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: entries,
            checksum: format!("{:016x}", Fnv1a::hash(&payload)),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Format("manifest extends past end of file".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", manifest.format_version)));
        }
        let payload = &bytes[16 + len..];
        check_layout(&manifest.tensors, payload.len() as u64)?;
        let expected = u64::from_str_radix(&manifest.checksum, 16)
            .map_err(|_| Error::Format(format!("bad checksum field {:?}", manifest.checksum)))?;
        let actual = Fnv1a::hash(payload);
        if expected != actual {
            return Err(Error::Checksum { expected, actual });
        }
        let tensors = manifest
            .tensors
            .iter()
            .map(|e| {
                let start = e.byte_offset as usize;
                let raw = &payload[start..start + e.byte_len() as usize];
                let data =
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
                NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data }
            })
            .collect();
        Ok(Self { config: manifest.config, tensors, metadata: manifest.metadata })
    }
}

/// Offsets must be in bounds and non-overlapping; dtypes must be `f32`.
fn check_layout(entries: &[TensorEntry], payload_len: u64) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        let end = e.byte_offset.checked_add(e.byte_len()).filter(|&end| end <= payload_len).ok_or_else(|| {
            Error::Format(format!(
                "{}: bytes {}..{} out of bounds for a {payload_len}-byte payload",
                e.name,
                e.byte_offset,
                e.byte_offset.saturating_add(e.byte_len())
            ))
        })?;
        spans.push((e.byte_offset, end, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }
    Ok(())
}

pub fn write_container(file: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_bytes(&fs::read(path)?)
}

fn bundle_tensors<T: Scalar>(bundle: &ModelBundle<T>) -> Vec<NamedTensor> {
    let mut out = vec![NamedTensor::matrix("embedding", &bundle.embedding)];
    for (l, w) in bundle.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push(NamedTensor::vector(p("attn_norm"), &w.attn_norm));
        out.push(NamedTensor::matrix(p("w_q"), &w.w_q));
        out.push(NamedTensor::matrix(p("w_k"), &w.w_k));
        out.push(NamedTensor::matrix(p("w_v"), &w.w_v));
        out.push(NamedTensor::matrix(p("w_o"), &w.w_o));
        out.push(NamedTensor::vector(p("mlp_norm"), &w.mlp_norm));
        out.push(NamedTensor::matrix(p("w_gate"), &w.w_gate));
        out.push(NamedTensor::matrix(p("w_up"), &w.w_up));
        out.push(NamedTensor::matrix(p("w_down"), &w.w_down));
    }
    out.push(NamedTensor::vector("final_norm", &bundle.final_norm));
    if let Some(u) = &bundle.unembedding {
        out.push(NamedTensor::matrix("unembedding", u));
    }
    out
}

impl TensorFile {
    pub fn from_bundle<T: Scalar>(bundle: &ModelBundle<T>) -> Self {
        Self { config: Some(bundle.config.clone()), tensors: bundle_tensors(bundle), metadata: BTreeMap::new() }
    }

    pub fn to_bundle(&self) -> Result<ModelBundle<f32>> {
        let cfg = self.config.clone().ok_or_else(|| Error::Format("container has no model config".into()))?;
        cfg.validate()?;
        let d = cfg.d_model;
        let mat = |name: &str, r: usize, c: usize| -> Result<Matrix<f32>> { self.require(name, &[r, c])?.to_matrix() };
        let vec = |name: &str| -> Result<Vec<f32>> { Ok(self.require(name, &[d])?.data.clone()) };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                Ok(LayerWeights {
                    attn_norm: vec(&p("attn_norm"))?,
                    w_q: mat(&p("w_q"), cfg.q_dim(), d)?,
                    w_k: mat(&p("w_k"), cfg.kv_dim(), d)?,
                    w_v: mat(&p("w_v"), cfg.kv_dim(), d)?,
                    w_o: mat(&p("w_o"), d, cfg.q_dim())?,
                    mlp_norm: vec(&p("mlp_norm"))?,
                    w_gate: mat(&p("w_gate"), cfg.d_ff, d)?,
                    w_up: mat(&p("w_up"), cfg.d_ff, d)?,
                    w_down: mat(&p("w_down"), d, cfg.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bundle = ModelBundle {
            embedding: mat("embedding", cfg.vocab_size, d)?,
            layers,
            final_norm: vec("final_norm")?,
            unembedding: if cfg.tie_embeddings { None } else { Some(mat("unembedding", cfg.vocab_size, d)?) },
            config: cfg,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Writes a bundle as `f32`, whatever its in-memory scalar type.
pub fn write_bundle<T: Scalar>(bundle: &ModelBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    write_container(&TensorFile::from_bundle(bundle), path)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<ModelBundle<f32>> {
    read_container(path)?.to_bundle()
}
