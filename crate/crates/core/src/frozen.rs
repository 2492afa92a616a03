//! Frozen replay: record every nonlinear factor of a forward pass at an
//! anchor input, then re-run the decoder with those factors held fixed.
//!
//! The recorded factors are the RMSNorm divisors, the MLP gate vectors and
//! the attention probability matrices. With them fixed, every remaining
//! operation is a bias-free linear map, so the replay is linear in the
//! input embeddings and reproduces the live pass exactly at the anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::pass::Pass;
use crate::model::{
    apply_gated, apply_norm, mix_values, EmbeddingSequence, ModelBundle, ModelConfig, OutputEmbedding, Target,
};
use crate::scalar::{cast_vec, Scalar};

/// Identifies the input a frozen state was captured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Anchor {
    pub seq_len: usize,
    pub d_model: usize,
    /// FNV-1a of the anchor embeddings, see [`EmbeddingSequence::fingerprint`].
    pub fingerprint: u64,
}

impl Anchor {
    pub fn of<T: Scalar>(x: &EmbeddingSequence<T>) -> Self {
        Self { seq_len: x.len(), d_model: x.d_model(), fingerprint: x.fingerprint() }
    }

    pub fn matches<T: Scalar>(&self, x: &EmbeddingSequence<T>) -> bool {
        *self == Self::of(x)
    }
}

/// Nonlinear factors of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer<T> {
    /// Attention-norm divisor per position.
    pub attn_norm: Vec<T>,
    /// Attention probabilities per query head, `seq_len × seq_len`, causal.
    pub probs: Vec<Matrix<T>>,
    /// MLP-norm divisor per position.
    pub mlp_norm: Vec<T>,
    /// Gate vector `g(W x*)` per position.
    pub gates: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenState<T> {
    pub layers: Vec<FrozenLayer<T>>,
    /// Final-norm divisor at the last position.
    pub final_norm: T,
    pub anchor: Anchor,
}

impl<T: Scalar> FrozenState<T> {
    /// Number of frozen factors: two norms, one gate and one probability
    /// matrix per head for each layer, plus the final norm.
    pub fn entry_count(&self) -> usize {
        self.layers.iter().map(|l| 3 + l.probs.len()).sum::<usize>() + 1
    }

    pub fn seq_len(&self) -> usize {
        self.anchor.seq_len
    }

    pub fn cast<U: Scalar>(&self) -> FrozenState<U> {
        FrozenState {
            layers: self
                .layers
                .iter()
                .map(|l| FrozenLayer {
                    attn_norm: cast_vec(&l.attn_norm),
                    probs: l.probs.iter().map(Matrix::cast).collect(),
                    mlp_norm: cast_vec(&l.mlp_norm),
                    gates: l.gates.iter().map(|g| cast_vec(g)).collect(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            anchor: self.anchor,
        }
    }

    pub(crate) fn check_model(&self, bundle: &ModelBundle<T>) -> Result<()> {
        let cfg = &bundle.config;
        if self.layers.len() != cfg.n_layers || self.anchor.d_model != cfg.d_model {
            return Err(Error::StaleFrozenState(format!(
                "captured for {} layers of width {}, model has {} layers of width {}",
                self.layers.len(),
                self.anchor.d_model,
                cfg.n_layers,
                cfg.d_model
            )));
        }
        if let Some(bad) =
            self.layers.iter().position(|l| l.probs.len() != cfg.n_heads || l.gates.iter().any(|g| g.len() != cfg.d_ff))
        {
            return Err(Error::StaleFrozenState(format!("layer {bad} factors do not match the model's heads or d_ff")));
        }
        Ok(())
    }

    /// Shape-only anchor check: off-anchor inputs of the right shape are
    /// accepted on purpose.
    pub(crate) fn check_input(&self, x: &EmbeddingSequence<T>) -> Result<()> {
        if x.len() != self.anchor.seq_len || x.d_model() != self.anchor.d_model {
            return Err(Error::StaleFrozenState(format!(
                "captured for {} positions of width {}, input has {} of width {}",
                self.anchor.seq_len,
                self.anchor.d_model,
                x.len(),
                x.d_model()
            )));
        }
        Ok(())
    }
}

/// Runs the live forward pass at `x` and records its nonlinear factors.
/// The returned output is bit-identical to [`crate::forward`].
pub fn capture_frozen<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
) -> Result<(FrozenState<T>, OutputEmbedding<T>)> {
    let mut pass = Pass::recording(bundle);
    let y = pass.run(x, Target::Output)?;
    let frozen = pass
        .into_frozen(Anchor::of(x))
        .ok_or_else(|| Error::Numeric("recording pass did not reach the output".into()))?;
    Ok((frozen, OutputEmbedding(y)))
}

/// `w ⊙ x / divisor` with a recorded divisor.
pub fn frozen_rms_norm<T: Scalar>(x: &[T], divisor: T, w: &[T]) -> Vec<T> {
    apply_norm(x, w, divisor)
}

/// `D · (gate ⊙ (Z x))` with a recorded gate.
pub fn frozen_gated_mlp<T: Scalar>(x: &[T], gate: &[T], w_up: &Matrix<T>, w_down: &Matrix<T>) -> Vec<T> {
    apply_gated(x, gate, w_up, w_down)
}

/// `W_O · concat_heads(P* · W_V x)` with recorded probabilities.
pub fn frozen_attention<T: Scalar>(
    x_seq: &[Vec<T>],
    probs: &[Matrix<T>],
    w_v: &Matrix<T>,
    w_o: &Matrix<T>,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<T>>> {
    mix_values(x_seq, probs, w_v, w_o, cfg)
}

/// Full decoder replay with every nonlinear factor taken from `frozen`.
/// Linear in `x`; `x` may differ from the anchor as long as shapes match.
pub fn frozen_forward<T: Scalar>(
    bundle: &ModelBundle<T>,
    frozen: &FrozenState<T>,
    x: &EmbeddingSequence<T>,
) -> Result<OutputEmbedding<T>> {
    frozen_forward_to(bundle, frozen, x, Target::Output).map(OutputEmbedding)
}

/// Frozen replay up to an arbitrary target (last position).
pub fn frozen_forward_to<T: Scalar>(
    bundle: &ModelBundle<T>,
    frozen: &FrozenState<T>,
    x: &EmbeddingSequence<T>,
    target: Target,
) -> Result<Vec<T>> {
    Pass::frozen(bundle, frozen)?.run(x, target)
}
