//! One decoder pass, either live (nonlinear factors computed from the
//! current activations, optionally recorded) or frozen (factors taken from a
//! [`FrozenState`]). Both modes share every arithmetic step, so a frozen
//! replay at its anchor reproduces the live pass bit for bit.

use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::{Anchor, FrozenLayer, FrozenState};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::ops::{apply_gated, apply_norm, attention_probs, gate, mix_values, norm_divisor};
use super::{EmbeddingSequence, ModelBundle};

/// Where inside a block a measurement is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Point {
    /// Residual stream after the block.
    LayerOut,
    /// Attention sublayer output before the residual add.
    AttnOut,
    /// MLP sublayer output before the residual add.
    MlpOut,
}

impl Point {
    pub const ALL: [Point; 3] = [Point::LayerOut, Point::AttnOut, Point::MlpOut];

    pub fn label(self) -> &'static str {
        match self {
            Point::LayerOut => "layer-out",
            Point::AttnOut => "attn-out",
            Point::MlpOut => "mlp-out",
        }
    }
}

/// Vector a pass is asked to produce, always at the last position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Target {
    /// Final-norm output embedding.
    Output,
    Layer {
        layer: usize,
        point: Point,
    },
}

impl Target {
    pub fn layer_out(layer: usize) -> Self {
        Target::Layer { layer, point: Point::LayerOut }
    }

    pub fn check<T: Scalar>(self, bundle: &ModelBundle<T>) -> Result<Self> {
        if let Target::Layer { layer, .. } = self {
            bundle.check_layer(layer)?;
        }
        Ok(self)
    }
}

pub(crate) struct LayerTrace<T> {
    pub attn_out: Vec<Vec<T>>,
    pub mlp_out: Vec<Vec<T>>,
}

pub(crate) struct Pass<'a, T> {
    bundle: &'a ModelBundle<T>,
    frozen: Option<&'a FrozenState<T>>,
    record: Option<Vec<FrozenLayer<T>>>,
    final_divisor: Option<T>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn live(bundle: &'a ModelBundle<T>) -> Self {
        Self { bundle, frozen: None, record: None, final_divisor: None }
    }

    pub fn recording(bundle: &'a ModelBundle<T>) -> Self {
        Self { bundle, frozen: None, record: Some(Vec::with_capacity(bundle.config.n_layers)), final_divisor: None }
    }

    pub fn frozen(bundle: &'a ModelBundle<T>, frozen: &'a FrozenState<T>) -> Result<Self> {
        frozen.check_model(bundle)?;
        Ok(Self { bundle, frozen: Some(frozen), record: None, final_divisor: None })
    }

    fn divisors(&self, h: &[Vec<T>], recorded: Option<&[T]>) -> Result<Vec<T>> {
        if let Some(d) = recorded {
            if d.len() != h.len() {
                return Err(stale_len(d.len(), h.len()));
            }
            return Ok(d.to_vec());
        }
        let eps = self.bundle.config.norm_eps;
        h.iter()
            .map(|x| {
                let d = norm_divisor(x, eps);
                if d > T::zero() && d.is_finite() {
                    Ok(d)
                } else {
                    Err(Error::Numeric(format!("RMSNorm divisor is {d}")))
                }
            })
            .collect()
    }

    /// Runs block `l` in place on the residual stream `h`.
    pub fn layer(&mut self, l: usize, h: &mut [Vec<T>]) -> Result<LayerTrace<T>> {
        let bundle = self.bundle;
        let cfg = &bundle.config;
        let w = &bundle.layers[l];
        let frozen = self.frozen.map(|f| &f.layers[l]);

        let attn_div = self.divisors(h, frozen.map(|f| f.attn_norm.as_slice()))?;
        let normed: Vec<Vec<T>> = h.iter().zip(&attn_div).map(|(x, &d)| apply_norm(x, &w.attn_norm, d)).collect();
        let probs: Cow<[Matrix<T>]> = match frozen {
            Some(f) => Cow::Borrowed(&f.probs),
            None => Cow::Owned(attention_probs(&normed, w, cfg)?),
        };
        let attn_out = mix_values(&normed, &probs, &w.w_v, &w.w_o, cfg)?;
        add_into(h, &attn_out);

        let mlp_div = self.divisors(h, frozen.map(|f| f.mlp_norm.as_slice()))?;
        let normed: Vec<Vec<T>> = h.iter().zip(&mlp_div).map(|(x, &d)| apply_norm(x, &w.mlp_norm, d)).collect();
        let gates: Cow<[Vec<T>]> = match frozen {
            Some(f) => {
                if f.gates.len() != h.len() {
                    return Err(stale_len(f.gates.len(), h.len()));
                }
                Cow::Borrowed(&f.gates)
            }
            None => Cow::Owned(normed.iter().map(|x| gate(x, &w.w_gate, cfg.activation)).collect()),
        };
        let mlp_out: Vec<Vec<T>> =
            normed.iter().zip(gates.iter()).map(|(x, g)| apply_gated(x, g, &w.w_up, &w.w_down)).collect();
        add_into(h, &mlp_out);

        if h.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite hidden state after layer {l}")));
        }
        if let Some(rec) = self.record.as_mut() {
            if rec.len() == l {
                rec.push(FrozenLayer {
                    attn_norm: attn_div,
                    probs: probs.into_owned(),
                    mlp_norm: mlp_div,
                    gates: gates.into_owned(),
                });
            }
        }
        Ok(LayerTrace { attn_out, mlp_out })
    }

    pub fn layers(&mut self, range: Range<usize>, h: &mut [Vec<T>]) -> Result<()> {
        for l in range {
            self.layer(l, h)?;
        }
        Ok(())
    }

    pub fn final_norm(&mut self, last: &[T]) -> Result<Vec<T>> {
        let divisor = match self.frozen {
            Some(f) => f.final_norm,
            None => self.divisors(&[last.to_vec()], None)?[0],
        };
        if self.record.is_some() {
            self.final_divisor = Some(divisor);
        }
        Ok(apply_norm(last, &self.bundle.final_norm, divisor))
    }

    /// Runs from the input embeddings to `target` and returns its value at
    /// the last position.
    pub fn run(&mut self, x: &EmbeddingSequence<T>, target: Target) -> Result<Vec<T>> {
        let cfg = &self.bundle.config;
        x.check_width(cfg.d_model)?;
        target.check(self.bundle)?;
        if let Some(f) = self.frozen {
            f.check_input(x)?;
        }
        let mut h = x.vectors().to_vec();
        let last = h.len() - 1;
        for l in 0..cfg.n_layers {
            let trace = self.layer(l, &mut h)?;
            if let Target::Layer { layer, point } = target {
                if layer == l {
                    return Ok(match point {
                        Point::LayerOut => h.swap_remove(last),
                        Point::AttnOut => trace.attn_out.into_iter().nth(last).unwrap_or_default(),
                        Point::MlpOut => trace.mlp_out.into_iter().nth(last).unwrap_or_default(),
                    });
                }
            }
        }
        self.final_norm(&h[last])
    }

    /// Finishes a recording pass. `None` unless every layer and the final
    /// norm were recorded.
    pub fn into_frozen(self, anchor: Anchor) -> Option<FrozenState<T>> {
        let layers = self.record?;
        if layers.len() != self.bundle.config.n_layers {
            return None;
        }
        Some(FrozenState { layers, final_norm: self.final_divisor?, anchor })
    }
}

fn add_into<T: Scalar>(h: &mut [Vec<T>], delta: &[Vec<T>]) {
    for (hi, di) in h.iter_mut().zip(delta) {
        for (a, &b) in hi.iter_mut().zip(di) {
            *a += b;
        }
    }
}

fn stale_len(frozen: usize, input: usize) -> Error {
    Error::StaleFrozenState(format!("captured for {frozen} positions, input has {input}"))
}
