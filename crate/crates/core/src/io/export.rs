//! Naming conventions for analysis tensors written to the shared container.
//!
//! | tensor                                   | shape              |
//! |------------------------------------------|--------------------|
//! | `{prefix}.block.{i}`                     | `d_out × d_model`  |
//! | `frozen.layers.{l}.attn_norm`            | `seq_len`          |
//! | `frozen.layers.{l}.mlp_norm`             | `seq_len`          |
//! | `frozen.layers.{l}.gates`                | `seq_len × d_ff`   |
//! | `frozen.layers.{l}.probs.{h}`            | `seq_len × seq_len`|
//! | `frozen.final_norm`                      | `1`                |
//! | `{prefix}.singular_values`               | `p`                |
//! | `{prefix}.u`, `{prefix}.v`               | `dim × r`          |
//!
//! Jacobian kind, target and anchor go in the manifest metadata under the
//! Jacobian's prefix.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::frozen::FrozenState;
use crate::jacobian::Jacobian;
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::spectra::SvdSummary;

use super::container::{write_container, NamedTensor, TensorFile};

pub fn jacobian_tensors<T: Scalar>(jacobian: &Jacobian<T>, prefix: &str) -> (Vec<NamedTensor>, serde_json::Value) {
    let tensors = jacobian
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| NamedTensor::matrix(format!("{prefix}.block.{i}"), b))
        .collect();
    let meta = json!({
        "kind": jacobian.kind,
        "target": jacobian.target,
        "anchor": jacobian.anchor,
        "blocks": jacobian.blocks.len(),
    });
    (tensors, meta)
}

pub fn jacobian_from_tensors(file: &TensorFile, prefix: &str) -> Result<Jacobian<f32>> {
    let meta =
        file.metadata.get(prefix).ok_or_else(|| Error::Format(format!("no metadata for Jacobian {prefix:?}")))?;
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("{prefix}: missing {k}")));
    let n: usize = serde_json::from_value(field("blocks")?)?;
    let blocks = (0..n)
        .map(|i| {
            let name = format!("{prefix}.block.{i}");
            file.get(&name).ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?.to_matrix()
        })
        .collect::<Result<Vec<Matrix<f32>>>>()?;
    Ok(Jacobian {
        kind: serde_json::from_value(field("kind")?)?,
        target: serde_json::from_value(field("target")?)?,
        anchor: serde_json::from_value(field("anchor")?)?,
        blocks,
    })
}

pub fn frozen_tensors<T: Scalar>(frozen: &FrozenState<T>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (l, layer) in frozen.layers.iter().enumerate() {
        let p = |s: &str| format!("frozen.layers.{l}.{s}");
        out.push(NamedTensor::vector(p("attn_norm"), &layer.attn_norm));
        out.push(NamedTensor::vector(p("mlp_norm"), &layer.mlp_norm));
        let gates =
            Matrix::from_fn(layer.gates.len(), layer.gates.first().map_or(0, Vec::len), |i, j| layer.gates[i][j]);
        out.push(NamedTensor::matrix(p("gates"), &gates));
        for (h, probs) in layer.probs.iter().enumerate() {
            out.push(NamedTensor::matrix(p(&format!("probs.{h}")), probs));
        }
    }
    out.push(NamedTensor::vector("frozen.final_norm", &[frozen.final_norm]));
    out
}

pub fn svd_tensors(summary: &SvdSummary, prefix: &str) -> Vec<NamedTensor> {
    vec![
        NamedTensor::vector(format!("{prefix}.singular_values"), &summary.singular_values),
        NamedTensor::matrix(format!("{prefix}.u"), &summary.u),
        NamedTensor::matrix(format!("{prefix}.v"), &summary.v),
    ]
}

/// Writes analysis tensors (no model config) to `path`.
pub fn export_tensors(
    tensors: Vec<NamedTensor>,
    metadata: BTreeMap<String, serde_json::Value>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_container(&TensorFile { config: None, tensors, metadata }, path)
}
