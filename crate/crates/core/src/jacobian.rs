//! Detached Jacobians by basis probing of the frozen replay, reconstruction
//! checks, and the finite-difference Jacobian of the unmodified model.
//!
//! Because the frozen replay is exactly linear, column `j` of the block for
//! position `i` is just the replay evaluated on `e_j` placed at position `i`.
//! Probes are independent and run on the rayon pool; each writes its own
//! column, so the result does not depend on completion order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::{capture_frozen, frozen_forward_to, Anchor, FrozenState};
use crate::linalg::{population_std, Matrix};
use crate::model::pass::Pass;
use crate::model::{forward_to, EmbeddingSequence, ModelBundle, Point, Target};
use crate::scalar::Scalar;

/// Default ceiling on the number of probe evaluations per Jacobian.
pub const DEFAULT_PROBE_BUDGET: usize = 1 << 18;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianKind {
    /// Nonlinear factors held fixed; exact at the anchor.
    Detached,
    /// Plain Jacobian of the unmodified model (finite differences).
    Standard,
}

/// One `d_out × d_model` block per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian<T> {
    pub kind: JacobianKind,
    pub blocks: Vec<Matrix<T>>,
    pub target: Target,
    pub anchor: Anchor,
}

impl<T: Scalar> Jacobian<T> {
    pub fn seq_len(&self) -> usize {
        self.blocks.len()
    }

    /// `Σᵢ Jᵢ · xᵢ`, accumulated in `f64`.
    pub fn apply(&self, x: &EmbeddingSequence<T>) -> Result<Vec<f64>> {
        apply_blocks(&self.blocks, x)
    }

    pub fn cast<U: Scalar>(&self) -> Jacobian<U> {
        Jacobian {
            kind: self.kind,
            blocks: self.blocks.iter().map(Matrix::cast).collect(),
            target: self.target,
            anchor: self.anchor,
        }
    }
}

pub fn apply_blocks<T: Scalar>(blocks: &[Matrix<T>], x: &EmbeddingSequence<T>) -> Result<Vec<f64>> {
    if blocks.len() != x.len() {
        return Err(Error::Shape(format!("{} Jacobian blocks for {} input positions", blocks.len(), x.len())));
    }
    let rows = blocks[0].rows();
    let mut y = vec![0.0f64; rows];
    for (b, xi) in blocks.iter().zip(x.vectors()) {
        if b.cols() != xi.len() || b.rows() != rows {
            return Err(Error::Shape(format!("block {:?} cannot multiply a vector of length {}", b.shape(), xi.len())));
        }
        for (yr, v) in y.iter_mut().zip(b.matvec_f64(xi)) {
            *yr += v;
        }
    }
    Ok(y)
}

/// `std(ŷ − y) / std(y)` with population standard deviations.
pub fn relative_error(y_hat: &[f64], y_true: &[f64]) -> f64 {
    assert_eq!(y_hat.len(), y_true.len());
    let diff: Vec<f64> = y_hat.iter().zip(y_true).map(|(a, b)| a - b).collect();
    population_std(&diff) / population_std(y_true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub y_hat: Vec<f64>,
    pub y_true: Vec<f64>,
    pub rel_error: f64,
    /// The input differs from the point the Jacobian was computed at.
    pub off_anchor: bool,
}

/// Rebuilds the target at `x` from the Jacobian and compares it with the
/// live model. Off-anchor inputs are allowed and flagged.
pub fn reconstruct<T: Scalar>(
    jacobian: &Jacobian<T>,
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
) -> Result<Reconstruction> {
    let y_hat = jacobian.apply(x)?;
    let y_true: Vec<f64> = forward_to(bundle, x, jacobian.target)?.iter().map(|v| v.as_f64()).collect();
    let rel_error = relative_error(&y_hat, &y_true);
    Ok(Reconstruction { y_hat, y_true, rel_error, off_anchor: !jacobian.anchor.matches(x) })
}

fn check_budget(probes: usize, limit: usize) -> Result<()> {
    if probes > limit {
        return Err(Error::ProbeBudget { probes, limit });
    }
    Ok(())
}

/// Assembles the matrix of a linear map `f` by evaluating it on every basis
/// input `(position, index)` listed in `order`. Every pair must appear.
pub fn probe_linear<T, F>(seq_len: usize, d_in: usize, order: &[(usize, usize)], f: F) -> Result<Vec<Matrix<T>>>
where
    T: Scalar,
    F: Fn(&EmbeddingSequence<T>) -> Result<Vec<T>> + Sync,
{
    if order.len() != seq_len * d_in {
        return Err(Error::Shape(format!("{} probes listed, {} required", order.len(), seq_len * d_in)));
    }
    if let Some(&(i, j)) = order.iter().find(|&&(i, j)| i >= seq_len || j >= d_in) {
        return Err(Error::Shape(format!("probe ({i}, {j}) is out of range")));
    }
    let columns: Vec<((usize, usize), Vec<T>)> = order
        .par_iter()
        .map(|&(i, j)| f(&EmbeddingSequence::basis(seq_len, d_in, i, j)).map(|c| ((i, j), c)))
        .collect::<Result<_>>()?;
    assemble(seq_len, d_in, columns)
}

fn assemble<T: Scalar>(seq_len: usize, d_in: usize, columns: Vec<((usize, usize), Vec<T>)>) -> Result<Vec<Matrix<T>>> {
    let d_out = columns.first().map_or(0, |(_, c)| c.len());
    let mut blocks = vec![Matrix::zeros(d_out, d_in); seq_len];
    let mut seen = vec![false; seq_len * d_in];
    for ((i, j), col) in columns {
        if i >= seq_len || j >= d_in || std::mem::replace(&mut seen[i * d_in + j], true) {
            return Err(Error::Shape(format!("probe ({i}, {j}) is out of range or repeated")));
        }
        blocks[i].set_col(j, &col);
    }
    Ok(blocks)
}

/// Probe order `(0,0), (0,1), …` used by default.
pub fn natural_order(seq_len: usize, d_in: usize) -> Vec<(usize, usize)> {
    (0..seq_len).flat_map(|i| (0..d_in).map(move |j| (i, j))).collect()
}

/// Central differences `[f(x + h·e) − f(x − h·e)] / 2h` of an arbitrary map.
pub fn central_difference<T, F>(x: &EmbeddingSequence<T>, h: f64, f: F) -> Result<Vec<Matrix<T>>>
where
    T: Scalar,
    F: Fn(&EmbeddingSequence<T>) -> Result<Vec<T>> + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Numeric(format!("finite-difference step must be positive, got {h}")));
    }
    let (k, d) = (x.len(), x.d_model());
    let columns: Vec<((usize, usize), Vec<T>)> = natural_order(k, d)
        .par_iter()
        .map(|&(i, j)| {
            let step = EmbeddingSequence::basis(k, d, i, j);
            let plus = f(&x.combine(T::one(), &step, T::of_f64(h)))?;
            let minus = f(&x.combine(T::one(), &step, T::of_f64(-h)))?;
            let col: Vec<T> =
                plus.iter().zip(&minus).map(|(a, b)| T::of_f64((a.as_f64() - b.as_f64()) / (2.0 * h))).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite difference at position {i}, index {j}")));
            }
            Ok(((i, j), col))
        })
        .collect::<Result<_>>()?;
    assemble(k, d, columns)
}

/// Detached Jacobian of `target` at `x`: captures the frozen state, then
/// probes the frozen replay.
pub fn detached_jacobian<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    target: Target,
) -> Result<Jacobian<T>> {
    check_budget(x.len() * x.d_model(), DEFAULT_PROBE_BUDGET)?;
    let (frozen, _) = capture_frozen(bundle, x)?;
    detached_jacobian_from(bundle, &frozen, target, DEFAULT_PROBE_BUDGET)
}

/// Probes the replay of an existing frozen state.
pub fn detached_jacobian_from<T: Scalar>(
    bundle: &ModelBundle<T>,
    frozen: &FrozenState<T>,
    target: Target,
    budget: usize,
) -> Result<Jacobian<T>> {
    let order = natural_order(frozen.seq_len(), bundle.config.d_model);
    detached_jacobian_ordered(bundle, frozen, target, budget, &order)
}

/// As [`detached_jacobian_from`] with an explicit probe order.
pub fn detached_jacobian_ordered<T: Scalar>(
    bundle: &ModelBundle<T>,
    frozen: &FrozenState<T>,
    target: Target,
    budget: usize,
    order: &[(usize, usize)],
) -> Result<Jacobian<T>> {
    let target = target.check(bundle)?;
    let (k, d) = (frozen.seq_len(), bundle.config.d_model);
    check_budget(k * d, budget)?;
    let blocks = probe_linear(k, d, order, |e| frozen_forward_to(bundle, frozen, e, target))?;
    Ok(Jacobian { kind: JacobianKind::Detached, blocks, target, anchor: frozen.anchor })
}

/// Detached Jacobian of an intermediate point of layer `layer`.
pub fn layer_detached_jacobian<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    layer: usize,
    point: Point,
) -> Result<Jacobian<T>> {
    bundle.check_layer(layer)?;
    detached_jacobian(bundle, x, Target::Layer { layer, point })
}

/// Finite-difference Jacobian of the unmodified model output.
pub fn numeric_jacobian_fd<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    h: f64,
) -> Result<Jacobian<T>> {
    numeric_jacobian_fd_to(bundle, x, h, Target::Output)
}

pub fn numeric_jacobian_fd_to<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    h: f64,
    target: Target,
) -> Result<Jacobian<T>> {
    let target = target.check(bundle)?;
    check_budget(2 * x.len() * x.d_model(), DEFAULT_PROBE_BUDGET)?;
    let blocks = central_difference(x, h, |xp| forward_to(bundle, xp, target))?;
    Ok(Jacobian { kind: JacobianKind::Standard, blocks, target, anchor: Anchor::of(x) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformScope {
    /// One block on its own, from the previous block's output.
    PerLayer,
    /// Input embeddings through the given block.
    Cumulative,
}

/// Single-token layer map (`d_model × d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTransform<T> {
    pub layer: usize,
    pub point: Point,
    pub scope: TransformScope,
    pub matrix: Matrix<T>,
}

/// Frozen map of block `layer` alone: from the residual stream entering the
/// block (all positions) to `point` at the last position. One block per
/// position.
pub fn layer_local_jacobian<T: Scalar>(
    bundle: &ModelBundle<T>,
    frozen: &FrozenState<T>,
    layer: usize,
    point: Point,
) -> Result<Vec<Matrix<T>>> {
    bundle.check_layer(layer)?;
    let (k, d) = (frozen.seq_len(), bundle.config.d_model);
    check_budget(k * d, DEFAULT_PROBE_BUDGET)?;
    probe_linear(k, d, &natural_order(k, d), |e| {
        let mut pass = Pass::frozen(bundle, frozen)?;
        let mut h = e.vectors().to_vec();
        let trace = pass.layer(layer, &mut h)?;
        Ok(match point {
            Point::LayerOut => h.pop().unwrap_or_default(),
            Point::AttnOut => trace.attn_out.into_iter().last().unwrap_or_default(),
            Point::MlpOut => trace.mlp_out.into_iter().last().unwrap_or_default(),
        })
    })
}

fn require_single_token<T: Scalar>(x: &EmbeddingSequence<T>) -> Result<()> {
    if x.len() != 1 {
        return Err(Error::Unsupported(format!(
            "per-layer factorization needs a single-token input, got {} positions; \
             longer inputs add cross-token terms between layers",
            x.len()
        )));
    }
    Ok(())
}

/// `W_layer`: block `layer` as a linear map on its own input, single token.
pub fn per_layer_transform<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    layer: usize,
    point: Point,
) -> Result<LayerTransform<T>> {
    require_single_token(x)?;
    let (frozen, _) = capture_frozen(bundle, x)?;
    let matrix = layer_local_jacobian(bundle, &frozen, layer, point)?.remove(0);
    Ok(LayerTransform { layer, point, scope: TransformScope::PerLayer, matrix })
}

/// `W_{0..layer}`: input embedding through block `layer`, single token.
pub fn cumulative_transform<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    layer: usize,
    point: Point,
) -> Result<LayerTransform<T>> {
    require_single_token(x)?;
    let matrix = layer_detached_jacobian(bundle, x, layer, point)?.blocks.remove(0);
    Ok(LayerTransform { layer, point, scope: TransformScope::Cumulative, matrix })
}

/// Ordered product `W_n ⋯ W_1 · W_0` of per-layer transforms given in
/// layer order.
pub fn compose_transforms<T: Scalar>(transforms: &[LayerTransform<T>]) -> Option<Matrix<T>> {
    let mut iter = transforms.iter();
    let first = iter.next()?.matrix.clone();
    Some(iter.fold(first, |acc, t| t.matrix.matmul(&acc)))
}
