//! Singular value decompositions, stable rank and layer-wise spectra of
//! detached Jacobians.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration carried out in `f64`
//! whatever the storage type of the input. Jacobi orthogonalization gives
//! singular values to high relative accuracy, which matters for rank
//! measurements on nearly low-rank maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::capture_frozen;
use crate::jacobian::{detached_jacobian_from, layer_local_jacobian, TransformScope, DEFAULT_PROBE_BUDGET};
use crate::linalg::Matrix;
use crate::model::{EmbeddingSequence, ModelBundle, Point, Target};
use crate::scalar::Scalar;

/// Singular values below this fraction of the largest are reported as zero.
pub const ZERO_CUTOFF: f64 = 1e-12;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 80;

/// Panels retained in reports by default.
pub const DEFAULT_RETAINED: usize = 8;

/// Thin decomposition `M = U · diag(S) · Vᵀ` with `p = min(rows, cols)`
/// columns in `U` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `rows × p`, orthonormal columns.
    pub u: Matrix<f64>,
    /// `cols × p`, orthonormal columns.
    pub v: Matrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix<f64> {
        let (m, n, p) = (self.u.rows(), self.v.rows(), self.singular_values.len());
        Matrix::from_fn(m, n, |i, j| (0..p).map(|k| self.u[(i, k)] * self.singular_values[k] * self.v[(j, k)]).sum())
    }

    /// Keeps the leading `r` singular vector pairs.
    pub fn summary(&self, r: usize) -> Result<SvdSummary> {
        let p = self.singular_values.len();
        if r == 0 || r > p {
            return Err(Error::Shape(format!("retain count {r} outside 1..={p}")));
        }
        let take = |m: &Matrix<f64>| Matrix::from_fn(m.rows(), r, |i, j| m[(i, j)]);
        Ok(SvdSummary {
            singular_values: self.singular_values.clone(),
            u: take(&self.u),
            v: take(&self.v),
            r,
            source: None,
        })
    }
}

/// Full spectrum plus the leading `r` left/right singular vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdSummary {
    pub singular_values: Vec<f64>,
    pub u: Matrix<f64>,
    pub v: Matrix<f64>,
    pub r: usize,
    /// Free-form provenance such as `"block 2 of output"`.
    pub source: Option<String>,
}

impl SvdSummary {
    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn stable_rank(&self) -> Result<f64> {
        stable_rank(&self.singular_values)
    }
}

/// Decomposition keeping the leading `r` pairs.
pub fn svd<T: Scalar>(m: &Matrix<T>, r: usize) -> Result<SvdSummary> {
    svd_full(m)?.summary(r)
}

pub fn svd_full<T: Scalar>(m: &Matrix<T>) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::Numeric("SVD input contains non-finite values".into()));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("SVD of an empty matrix".into()));
    }
    let a = m.cast::<f64>();
    if a.rows() >= a.cols() {
        jacobi_svd(&a)
    } else {
        let t = jacobi_svd(&a.transpose())?;
        // Mᵀ = U S Vᵀ  ⇒  M = V S Uᵀ; re-orient signs on the new U.
        let mut out = Svd { singular_values: t.singular_values, u: t.v, v: t.u };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// One-sided Jacobi for `rows >= cols`.
fn jacobi_svd(a: &Matrix<f64>) -> Result<Svd> {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let tol = m as f64 * f64::EPSILON;

    let mut converged = false;
    let mut residual = 0.0f64;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = gram(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps, residual });
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let s_max = sigma[order[0]];
    for s in sigma.iter_mut() {
        if *s <= ZERO_CUTOFF * s_max {
            *s = 0.0;
        }
    }

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for &j in &order {
        values.push(sigma[j]);
        v_cols.push(v[j].clone());
        if sigma[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            missing.push(u_cols.len());
            u_cols.push(vec![0.0; m]);
        }
    }
    complete_basis(&mut u_cols, &missing, m);

    let mut out = Svd { singular_values: values, u: Matrix::from_cols(m, &u_cols), v: Matrix::from_cols(n, &v_cols) };
    fix_signs(&mut out);
    Ok(out)
}

fn gram(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (x, y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to
/// every other column (Gram-Schmidt over the standard basis, two passes).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let proj: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Orients each pair so the largest-magnitude entry of the `U` column is
/// positive (first such entry on ties).
fn fix_signs(svd: &mut Svd) {
    for k in 0..svd.singular_values.len() {
        let mut best = 0;
        for i in 0..svd.u.rows() {
            if svd.u[(i, k)].abs() > svd.u[(best, k)].abs() {
                best = i;
            }
        }
        if svd.u[(best, k)] < 0.0 {
            for i in 0..svd.u.rows() {
                svd.u[(i, k)] = -svd.u[(i, k)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, k)] = -svd.v[(i, k)];
            }
        }
    }
}

/// `R = Σ Sᵢ² / S²_max`, evaluated as `Σ (Sᵢ/S_max)²`.
pub fn stable_rank(s: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::UndefinedRank);
    }
    if s.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Numeric("singular values must be finite and non-negative".into()));
    }
    let max = s.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::UndefinedRank);
    }
    Ok(s.iter().map(|&x| (x / max) * (x / max)).sum())
}

/// Spectrum divided by its largest value.
pub fn normalize_by_max(s: &[f64]) -> Vec<f64> {
    let max = s.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|x| x / max).collect()
}

/// Spectrum divided by its Euclidean norm (the Frobenius norm of the matrix).
pub fn normalize_by_frobenius(s: &[f64]) -> Vec<f64> {
    let fro = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if fro == 0.0 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|x| x / fro).collect()
}

/// `|⟨u_layer_a, u_final_b⟩|` for the top two columns of each panel;
/// entry `[a][b]`.
pub fn project_onto_final(u_layer: &Matrix<f64>, u_final: &Matrix<f64>) -> Result<[[f64; 2]; 2]> {
    if u_layer.rows() != u_final.rows() {
        return Err(Error::Shape(format!("panels have vector length {} and {}", u_layer.rows(), u_final.rows())));
    }
    if u_layer.cols() < 2 || u_final.cols() < 2 {
        return Err(Error::Shape("projection needs at least two singular vectors per panel".into()));
    }
    let mut out = [[0.0; 2]; 2];
    for (a, row) in out.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let dot: f64 = (0..u_layer.rows()).map(|i| u_layer[(i, a)] * u_final[(i, b)]).sum();
            *cell = dot.abs();
        }
    }
    Ok(out)
}

/// One measurement in a spectrum profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub layer: usize,
    pub point: Point,
    pub scope: TransformScope,
    /// Input position whose block was decomposed.
    pub position: usize,
    /// `None` when the block is identically zero.
    pub stable_rank: Option<f64>,
    pub singular_values: Vec<f64>,
    pub normalized_by_max: Vec<f64>,
    pub normalized_by_frobenius: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableRankReport {
    pub seq_len: usize,
    pub entries: Vec<ProfileEntry>,
}

impl StableRankReport {
    /// Entries of one series, ordered by layer then position.
    pub fn series(&self, point: Point, scope: TransformScope) -> impl Iterator<Item = &ProfileEntry> {
        self.entries.iter().filter(move |e| e.point == point && e.scope == scope)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOptions {
    pub points: Vec<Point>,
    pub scopes: Vec<TransformScope>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { points: Point::ALL.to_vec(), scopes: vec![TransformScope::Cumulative, TransformScope::PerLayer] }
    }
}

fn entry_for<T: Scalar>(
    block: &Matrix<T>,
    layer: usize,
    point: Point,
    scope: TransformScope,
    position: usize,
) -> Result<ProfileEntry> {
    let s = svd_full(block)?.singular_values;
    let stable_rank = match stable_rank(&s) {
        Ok(r) => Some(r),
        Err(Error::UndefinedRank) => None,
        Err(e) => return Err(e),
    };
    Ok(ProfileEntry {
        layer,
        point,
        scope,
        position,
        stable_rank,
        normalized_by_max: normalize_by_max(&s),
        normalized_by_frobenius: normalize_by_frobenius(&s),
        singular_values: s,
    })
}

/// Stable rank and spectra at every requested (layer, point, scope).
///
/// Cumulative entries decompose the detached Jacobian from the input
/// embeddings to the point; per-layer entries decompose the block's own
/// frozen map from its input residual stream. For multi-token inputs each
/// position contributes its own block; per-layer blocks then omit the
/// cross-token terms that flow through earlier layers.
pub fn spectrum_profile<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    options: &ProfileOptions,
) -> Result<StableRankReport> {
    let (frozen, _) = capture_frozen(bundle, x)?;
    let mut entries = Vec::new();
    for layer in 0..bundle.config.n_layers {
        for &scope in &options.scopes {
            for &point in &options.points {
                let blocks = match scope {
                    TransformScope::Cumulative => {
                        detached_jacobian_from(bundle, &frozen, Target::Layer { layer, point }, DEFAULT_PROBE_BUDGET)?
                            .blocks
                    }
                    TransformScope::PerLayer => layer_local_jacobian(bundle, &frozen, layer, point)?,
                };
                for (position, block) in blocks.iter().enumerate() {
                    entries.push(entry_for(block, layer, point, scope, position)?);
                }
            }
        }
    }
    Ok(StableRankReport { seq_len: x.len(), entries })
}

#[cfg(test)]
mod tests;
