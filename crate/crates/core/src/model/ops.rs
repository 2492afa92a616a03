//! Decoder building blocks, each split into a nonlinear factor and a linear
//! application of that factor so the frozen replay can reuse the exact same
//! arithmetic.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, mean_square, Scalar};

use super::{Activation, LayerWeights, ModelConfig};

/// Cubic coefficient of the tanh-approximate GELU.
pub const APPROX_GELU_CUBIC: f64 = 0.044715;

/// `√(ms(x) + eps)`, the RMSNorm divisor.
pub fn norm_divisor<T: Scalar>(x: &[T], eps: f64) -> T {
    T::of_f64((mean_square(x) + eps).sqrt())
}

/// `w ⊙ x / divisor`. Linear in `x` for a fixed divisor.
pub fn apply_norm<T: Scalar>(x: &[T], w: &[T], divisor: T) -> Vec<T> {
    assert_eq!(x.len(), w.len(), "norm weight length mismatch");
    let div = divisor.as_f64();
    x.iter().zip(w).map(|(&xi, &wi)| T::of_f64(wi.as_f64() * xi.as_f64() / div)).collect()
}

pub fn rms_norm<T: Scalar>(x: &[T], w: &[T], eps: f64) -> Vec<T> {
    apply_norm(x, w, norm_divisor(x, eps))
}

/// Gate nonlinearity `g(u)` evaluated in `f64`.
pub fn activation(kind: Activation, u: f64) -> f64 {
    match kind {
        Activation::SwiGlu | Activation::SwishGlu => u / (1.0 + (-u).exp()),
        Activation::GeGlu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * u * (1.0 + (c * (u + APPROX_GELU_CUBIC * u * u * u)).tanh())
        }
    }
}

/// Gate vector `g(W x)`.
pub(crate) fn gate<T: Scalar>(x: &[T], w_gate: &Matrix<T>, kind: Activation) -> Vec<T> {
    w_gate.matvec(x).into_iter().map(|u| T::of_f64(activation(kind, u.as_f64()))).collect()
}

/// `D · (gate ⊙ (Z x))`. Linear in `x` for a fixed gate.
pub fn apply_gated<T: Scalar>(x: &[T], gate: &[T], w_up: &Matrix<T>, w_down: &Matrix<T>) -> Vec<T> {
    let z = w_up.matvec(x);
    assert_eq!(z.len(), gate.len(), "gate length mismatch");
    let hidden: Vec<T> = gate.iter().zip(&z).map(|(&g, &zi)| T::of_f64(g.as_f64() * zi.as_f64())).collect();
    w_down.matvec(&hidden)
}

/// `D · (g(W x) ⊗ (Z x))`.
pub fn gated_mlp<T: Scalar>(
    x: &[T],
    w_gate: &Matrix<T>,
    w_up: &Matrix<T>,
    w_down: &Matrix<T>,
    kind: Activation,
) -> Vec<T> {
    apply_gated(x, &gate(x, w_gate, kind), w_up, w_down)
}

/// Rotary embedding of one head vector at `position`, rotating dimension
/// pairs `(i, i + d_head/2)`.
pub fn rope_rotate<T: Scalar>(v: &mut [T], position: usize, theta: f64) {
    let d = v.len();
    let half = d / 2;
    for i in 0..half {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        let a = v[i].as_f64();
        let b = v[i + half].as_f64();
        v[i] = T::of_f64(a * cos - b * sin);
        v[i + half] = T::of_f64(a * sin + b * cos);
    }
}

/// Causal softmax attention probabilities, one `k × k` matrix per query
/// head. Row `i` covers keys `0..=i`; entries above the diagonal are zero.
#[allow(clippy::needless_range_loop)]
pub fn attention_probs<T: Scalar>(
    x_seq: &[Vec<T>],
    layer: &LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<Vec<Matrix<T>>> {
    let k = x_seq.len();
    let dh = cfg.d_head;
    let project = |w: &Matrix<T>, n_heads: usize| -> Vec<Vec<Vec<T>>> {
        x_seq
            .iter()
            .enumerate()
            .map(|(pos, x)| {
                let full = w.matvec(x);
                (0..n_heads)
                    .map(|h| {
                        let mut head = full[h * dh..(h + 1) * dh].to_vec();
                        rope_rotate(&mut head, pos, cfg.rope_theta);
                        head
                    })
                    .collect()
            })
            .collect()
    };
    let q = project(&layer.w_q, cfg.n_heads);
    let kk = project(&layer.w_k, cfg.n_kv_heads);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let kv = cfg.kv_head(h);
        let mut p = Matrix::zeros(k, k);
        let mut scores = vec![0.0f64; k];
        for i in 0..k {
            for j in 0..=i {
                scores[j] = dot(&q[i][h], &kk[j][kv]) * scale;
            }
            let row = &mut scores[..=i];
            if row.iter().any(|s| !s.is_finite()) {
                return Err(Error::Numeric(format!("non-finite attention score in head {h}, row {i}")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for j in 0..=i {
                p[(i, j)] = T::of_f64(scores[j] / total);
            }
        }
        probs.push(p);
    }
    Ok(probs)
}

/// `W_O · concat_heads(P · V)` with `V = W_V x`. Linear in `x_seq` for fixed
/// probabilities.
pub fn mix_values<T: Scalar>(
    x_seq: &[Vec<T>],
    probs: &[Matrix<T>],
    w_v: &Matrix<T>,
    w_o: &Matrix<T>,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<T>>> {
    let k = x_seq.len();
    if probs.len() != cfg.n_heads || probs.iter().any(|p| p.shape() != (k, k)) {
        return Err(Error::Shape(format!("expected {} probability matrices of shape {k}x{k}", cfg.n_heads)));
    }
    let dh = cfg.d_head;
    let values: Vec<Vec<T>> = x_seq.iter().map(|x| w_v.matvec(x)).collect();
    let mut out = Vec::with_capacity(k);
    let mut concat = vec![T::zero(); cfg.q_dim()];
    for i in 0..k {
        for (h, p) in probs.iter().enumerate() {
            let kv = cfg.kv_head(h);
            for c in 0..dh {
                let mut acc = 0.0f64;
                for (j, v) in values.iter().enumerate().take(i + 1) {
                    acc += p[(i, j)].as_f64() * v[kv * dh + c].as_f64();
                }
                concat[h * dh + c] = T::of_f64(acc);
            }
        }
        out.push(w_o.matvec(&concat));
    }
    Ok(out)
}

/// Causal multi-head attention over already-normalized inputs at positions
/// `0..k`.
pub fn attention<T: Scalar>(x_seq: &[Vec<T>], layer: &LayerWeights<T>, cfg: &ModelConfig) -> Result<Vec<Vec<T>>> {
    let probs = attention_probs(x_seq, layer, cfg)?;
    mix_values(x_seq, &probs, &layer.w_v, &layer.w_o, cfg)
}
