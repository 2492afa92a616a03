//! Ranking tokens against directions in embedding space.
//!
//! Input-space decoding finds the embedding rows nearest to a vector;
//! output-space decoding ranks tokens by unembedding logit. Scores are
//! computed in `f64` and ties always go to the lowest token id.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ToyVocab;
use crate::linalg::{norm, Matrix};
use crate::model::ModelBundle;
use crate::scalar::{dot, Scalar};
use crate::spectra::SvdSummary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Cosine,
    Dot,
    /// Scored as negative distance so larger is closer.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    InputEmbedding,
    OutputUnembedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub id: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDecoding {
    pub entries: Vec<TokenScore>,
    pub space: Space,
    pub source: String,
}

impl TokenDecoding {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.text.as_str()).collect()
    }
}

/// Indices of the `k` largest scores, descending, lowest index first on ties.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn ranked(scores: &[f64], k: usize, vocab: &ToyVocab, space: Space, source: String) -> TokenDecoding {
    let entries = top_k_indices(scores, k)
        .into_iter()
        .map(|id| TokenScore { id, text: vocab.token(id).to_string(), score: scores[id] })
        .collect();
    TokenDecoding { entries, space, source }
}

fn check_len<T>(v: &[T], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Shape(format!("vector of length {} in a {d}-dimensional space", v.len())));
    }
    Ok(())
}

/// Scores of every row of `table` against `v` under `metric`.
pub fn row_scores<T: Scalar>(table: &Matrix<T>, v: &[T], metric: Metric) -> Result<Vec<f64>> {
    check_len(v, table.cols())?;
    let v_norm = norm(v);
    if v_norm == 0.0 {
        return Err(Error::UndefinedDirection);
    }
    Ok((0..table.rows())
        .map(|t| {
            let row = table.row(t);
            match metric {
                Metric::Dot => dot(row, v),
                Metric::Cosine => {
                    let r = norm(row);
                    if r == 0.0 {
                        0.0
                    } else {
                        dot(row, v) / (r * v_norm)
                    }
                }
                Metric::Euclidean => {
                    -row.iter().zip(v).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>().sqrt()
                }
            }
        })
        .collect())
}

/// Embedding rows nearest to `v`.
pub fn nearest_input_tokens<T: Scalar>(
    v: &[T],
    bundle: &ModelBundle<T>,
    vocab: &ToyVocab,
    k: usize,
    metric: Metric,
) -> Result<TokenDecoding> {
    let scores = row_scores(&bundle.embedding, v, metric)?;
    Ok(ranked(&scores, k, vocab, Space::InputEmbedding, String::new()))
}

/// Tokens ranked by unembedding logit `U_emb · v`.
pub fn decode_output_direction<T: Scalar>(
    v: &[T],
    bundle: &ModelBundle<T>,
    vocab: &ToyVocab,
    k: usize,
) -> Result<TokenDecoding> {
    let u = bundle.unembedding();
    check_len(v, u.cols())?;
    let scores = u.matvec_f64(v);
    Ok(ranked(&scores, k, vocab, Space::OutputUnembedding, String::new()))
}

/// A row or column of a Jacobian block with its decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedVector {
    pub index: usize,
    pub norm: f64,
    /// `None` for zero vectors, which have no direction to decode.
    pub decoding: Option<TokenDecoding>,
}

fn top_by_norm<T: Scalar>(
    vectors: Vec<Vec<T>>,
    n: usize,
    label: &str,
    mut decode: impl FnMut(&[T]) -> Result<TokenDecoding>,
) -> Result<Vec<RankedVector>> {
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    top_k_indices(&norms, n)
        .into_iter()
        .map(|index| {
            let decoding = if norms[index] == 0.0 {
                None
            } else {
                let mut d = decode(&vectors[index])?;
                d.source = format!("{label} {index}");
                Some(d)
            };
            Ok(RankedVector { index, norm: norms[index], decoding })
        })
        .collect()
}

/// Rows with the largest norms, each decoded in input-embedding space.
pub fn top_rows_by_norm<T: Scalar>(
    block: &Matrix<T>,
    n: usize,
    bundle: &ModelBundle<T>,
    vocab: &ToyVocab,
    k: usize,
    metric: Metric,
) -> Result<Vec<RankedVector>> {
    let rows = (0..block.rows()).map(|i| block.row(i).to_vec()).collect();
    top_by_norm(rows, n, "row", |v| nearest_input_tokens(v, bundle, vocab, k, metric))
}

/// Columns with the largest norms, each decoded through the unembedding.
pub fn top_cols_by_norm<T: Scalar>(
    block: &Matrix<T>,
    n: usize,
    bundle: &ModelBundle<T>,
    vocab: &ToyVocab,
    k: usize,
) -> Result<Vec<RankedVector>> {
    let cols = (0..block.cols()).map(|j| block.col(j)).collect();
    top_by_norm(cols, n, "column", |v| decode_output_direction(v, bundle, vocab, k))
}

/// Space used for left singular vectors. For the final output both
/// coincide with the usual reading; for intermediate layers they differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeftSpace {
    /// Through the final unembedding (logit-lens style).
    #[default]
    Unembedding,
    /// Nearest input-embedding rows (layer-local residual geometry).
    InputEmbedding,
}

/// Decodings of one singular pair, both signs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDecoding {
    pub index: usize,
    pub singular_value: f64,
    pub u_positive: TokenDecoding,
    pub u_negative: TokenDecoding,
    pub v_positive: TokenDecoding,
    pub v_negative: TokenDecoding,
}

/// Decodes each retained `U` column (output side) and `V` column (input
/// side) in both orientations.
pub fn decode_svd_panels<T: Scalar>(
    summary: &SvdSummary,
    bundle: &ModelBundle<T>,
    vocab: &ToyVocab,
    k: usize,
    metric: Metric,
    left: LeftSpace,
) -> Result<Vec<PanelDecoding>> {
    let decode_u = |u: &[T]| -> Result<TokenDecoding> {
        match left {
            LeftSpace::Unembedding => decode_output_direction(u, bundle, vocab, k),
            LeftSpace::InputEmbedding => nearest_input_tokens(u, bundle, vocab, k, metric),
        }
    };
    let labelled = |mut d: TokenDecoding, what: String| {
        d.source = what;
        d
    };
    (0..summary.r)
        .map(|c| {
            let u: Vec<T> = summary.u.col(c).into_iter().map(T::of_f64).collect();
            let v: Vec<T> = summary.v.col(c).into_iter().map(T::of_f64).collect();
            let neg = |x: &[T]| x.iter().map(|&a| -a).collect::<Vec<T>>();
            Ok(PanelDecoding {
                index: c,
                singular_value: summary.singular_values[c],
                u_positive: labelled(decode_u(&u)?, format!("+U col {c}")),
                u_negative: labelled(decode_u(&neg(&u))?, format!("-U col {c}")),
                v_positive: labelled(nearest_input_tokens(&v, bundle, vocab, k, metric)?, format!("+V col {c}")),
                v_negative: labelled(nearest_input_tokens(&neg(&v), bundle, vocab, k, metric)?, format!("-V col {c}")),
            })
        })
        .collect()
}

/// Markdown grid: one row per label, one cell per column of top-k strings.
pub fn token_table_markdown(header: &[String], rows: &[(String, Vec<Vec<String>>)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", " --- |".repeat(header.len())));
    for (label, cells) in rows {
        let cells: Vec<String> = cells.iter().map(|c| c.join(", ").replace('|', "\\|")).collect();
        out.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
    }
    out
}

#[cfg(test)]
mod tests;
