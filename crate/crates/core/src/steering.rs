//! Steering with a concept prompt's layer Jacobian.
//!
//! A [`SteeringSpec`] holds the detached Jacobian of layer `L`'s output for a
//! steer prompt. During generation the live activations of a new prompt at
//! layer `L` are replaced by
//!
//! ```text
//! h_i ← λ · f_L(x_new)_i + (1 − λ) · J_{a(i)} · x_new_i
//! ```
//!
//! where `a` maps new-prompt positions to steer-Jacobian blocks (see
//! [`Alignment`]), and the result is fed through the remaining layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::{layer_detached_jacobian, Jacobian, JacobianKind};
use crate::model::pass::Pass;
use crate::model::{
    argmax, embed, generate_greedy, logits, EmbeddingSequence, ModelBundle, Point, Target, TokenSequence,
};
use crate::scalar::Scalar;

/// How new-prompt position `i` picks a steer block when prompt lengths differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Lengths must match.
    Exact,
    /// Positions past the steer prompt are left unsteered.
    Truncate,
    /// Block `min(i, k_steer − 1)`.
    #[default]
    ClampLast,
    /// Only the last position is steered, with the last block.
    LastPositionOnly,
}

impl Alignment {
    /// Steer block for each of `len` positions, `None` where unsteered.
    pub fn blocks(self, len: usize, k_steer: usize) -> Result<Vec<Option<usize>>> {
        match self {
            Alignment::Exact if len != k_steer => {
                Err(Error::Alignment(format!("exact alignment needs {k_steer} positions, the new prompt has {len}")))
            }
            Alignment::Exact | Alignment::Truncate => Ok((0..len).map(|i| (i < k_steer).then_some(i)).collect()),
            Alignment::ClampLast => Ok((0..len).map(|i| Some(i.min(k_steer - 1))).collect()),
            Alignment::LastPositionOnly => Ok((0..len).map(|i| (i + 1 == len).then_some(k_steer - 1)).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    EveryStep,
    FirstStepOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringSpec<T> {
    pub layer: usize,
    pub lambda: f64,
    pub alignment: Alignment,
    pub schedule: Schedule,
    pub jacobian: Jacobian<T>,
}

impl<T: Scalar> SteeringSpec<T> {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_alignment(mut self, alignment: Alignment) -> Self {
        self.alignment = alignment;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self, bundle: &ModelBundle<T>) -> Result<()> {
        bundle.check_layer(self.layer)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        let expected = Target::Layer { layer: self.layer, point: Point::LayerOut };
        if self.jacobian.kind != JacobianKind::Detached || self.jacobian.target != expected {
            return Err(Error::Config(format!(
                "steering needs a detached Jacobian of layer {} output, got {:?} of {:?}",
                self.layer, self.jacobian.kind, self.jacobian.target
            )));
        }
        let d = bundle.config.d_model;
        if self.jacobian.blocks.is_empty() || self.jacobian.blocks.iter().any(|b| b.shape() != (d, d)) {
            return Err(Error::Shape(format!("steering blocks must be non-empty and {d}×{d}")));
        }
        Ok(())
    }
}

/// Builds the operator from `steer_prompt` with `λ = 0.5` and default
/// alignment and schedule.
pub fn build_steering<T: Scalar>(
    bundle: &ModelBundle<T>,
    steer_prompt: &TokenSequence,
    layer: usize,
) -> Result<SteeringSpec<T>> {
    let x = embed(bundle, steer_prompt)?;
    let jacobian = layer_detached_jacobian(bundle, &x, layer, Point::LayerOut)?;
    Ok(SteeringSpec { layer, lambda: 0.5, alignment: Alignment::default(), schedule: Schedule::default(), jacobian })
}

fn blend<T: Scalar>(h: &mut [Vec<T>], x: &EmbeddingSequence<T>, spec: &SteeringSpec<T>) -> Result<()> {
    let blocks = spec.alignment.blocks(x.len(), spec.jacobian.seq_len())?;
    let lambda = spec.lambda;
    for ((hi, xi), block) in h.iter_mut().zip(x.vectors()).zip(blocks) {
        let Some(b) = block else { continue };
        let steer = spec.jacobian.blocks[b].matvec_f64(xi);
        for (v, s) in hi.iter_mut().zip(steer) {
            *v = T::of_f64(lambda * v.as_f64() + (1.0 - lambda) * s);
        }
    }
    Ok(())
}

/// Layer-`L` activations of `x`, all positions, after blending.
pub fn apply_steering_to<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &EmbeddingSequence<T>,
    spec: &SteeringSpec<T>,
) -> Result<Vec<Vec<T>>> {
    spec.validate(bundle)?;
    x.check_width(bundle.config.d_model)?;
    let mut h = x.vectors().to_vec();
    Pass::live(bundle).layers(0..spec.layer + 1, &mut h)?;
    blend(&mut h, x, spec)?;
    Ok(h)
}

pub fn apply_steering<T: Scalar>(
    bundle: &ModelBundle<T>,
    new_prompt: &TokenSequence,
    spec: &SteeringSpec<T>,
) -> Result<Vec<Vec<T>>> {
    apply_steering_to(bundle, &embed(bundle, new_prompt)?, spec)
}

fn steered_next<T: Scalar>(bundle: &ModelBundle<T>, tokens: &TokenSequence, spec: &SteeringSpec<T>) -> Result<usize> {
    let x = embed(bundle, tokens)?;
    let mut h = apply_steering_to(bundle, &x, spec)?;
    let mut pass = Pass::live(bundle);
    pass.layers(spec.layer + 1..bundle.config.n_layers, &mut h)?;
    let y = pass.final_norm(&h[h.len() - 1])?;
    Ok(argmax(&logits(bundle, &y)))
}

/// Normal and steered continuations of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeredGeneration {
    pub prompt: Vec<usize>,
    pub normal: Vec<usize>,
    pub steered: Vec<usize>,
}

impl SteeredGeneration {
    pub fn differing_positions(&self) -> usize {
        self.normal.iter().zip(&self.steered).filter(|(a, b)| a != b).count()
    }
}

/// Greedy generation with the steering blend at layer `L`.
pub fn generate_steered<T: Scalar>(
    bundle: &ModelBundle<T>,
    new_prompt: &TokenSequence,
    spec: &SteeringSpec<T>,
    n_tokens: usize,
) -> Result<SteeredGeneration> {
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens must be at least 1".into()));
    }
    spec.validate(bundle)?;
    let normal = generate_greedy(bundle, new_prompt, n_tokens)?;
    let mut tokens = new_prompt.clone();
    let mut steered = Vec::with_capacity(n_tokens);
    for step in 0..n_tokens {
        let next = if step == 0 || spec.schedule == Schedule::EveryStep {
            steered_next(bundle, &tokens, spec)?
        } else {
            crate::model::greedy_next_token(bundle, &tokens)?
        };
        tokens.push(next);
        steered.push(next);
    }
    Ok(SteeredGeneration { prompt: new_prompt.ids().to_vec(), normal, steered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{make_tiny_model, InitMode};
    use crate::jacobian::reconstruct;
    use crate::model::ModelConfig;

    fn model() -> ModelBundle<f32> {
        make_tiny_model(11, &ModelConfig::tiny(32, 3), InitMode::Random).unwrap()
    }

    fn prompt(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn alignment_rules() {
        assert_eq!(Alignment::ClampLast.blocks(4, 2).unwrap(), vec![Some(0), Some(1), Some(1), Some(1)]);
        assert_eq!(Alignment::Truncate.blocks(3, 2).unwrap(), vec![Some(0), Some(1), None]);
        assert_eq!(Alignment::LastPositionOnly.blocks(3, 5).unwrap(), vec![None, None, Some(4)]);
        assert_eq!(Alignment::Exact.blocks(2, 2).unwrap(), vec![Some(0), Some(1)]);
        assert!(matches!(Alignment::Exact.blocks(3, 2), Err(Error::Alignment(_))));
    }

    #[test]
    fn build_is_deterministic_and_reconstructs_its_anchor() {
        let bundle = model();
        let p = prompt(&[1, 5, 9]);
        let a = build_steering(&bundle, &p, 1).unwrap();
        let b = build_steering(&bundle, &p, 1).unwrap();
        assert_eq!(a, b);
        let r = reconstruct(&a.jacobian, &bundle, &embed(&bundle, &p).unwrap()).unwrap();
        assert!(r.rel_error <= 1e-5, "{}", r.rel_error);
    }

    #[test]
    fn zero_weight_layer_zero_is_the_residual_identity() {
        let mut bundle = model();
        for l in &mut bundle.layers {
            l.zero_projections();
        }
        let spec = build_steering(&bundle, &prompt(&[2, 3]), 0).unwrap();
        let d = bundle.config.d_model;
        assert_eq!(spec.jacobian.blocks[1], crate::linalg::Matrix::identity(d));
        assert_eq!(spec.jacobian.blocks[0], crate::linalg::Matrix::zeros(d, d));
    }

    #[test]
    fn lambda_endpoints_and_affinity() {
        let bundle = model();
        let spec = build_steering(&bundle, &prompt(&[4, 8]), 1).unwrap();
        let new = prompt(&[7, 3, 12, 40]);
        let x = embed(&bundle, &new).unwrap();

        let mut live = x.vectors().to_vec();
        Pass::live(&bundle).layers(0..2, &mut live).unwrap();
        let at1 = apply_steering(&bundle, &new, &spec.clone().with_lambda(1.0)).unwrap();
        assert_eq!(at1, live);

        let at0 = apply_steering(&bundle, &new, &spec.clone().with_lambda(0.0)).unwrap();
        for (i, row) in at0.iter().enumerate() {
            let block = &spec.jacobian.blocks[i.min(1)];
            let expect: Vec<f32> = block.matvec_f64(x.position(i)).into_iter().map(|v| v as f32).collect();
            assert_eq!(row, &expect);
        }

        for lambda in [0.25, 0.5, 0.75] {
            let mid = apply_steering(&bundle, &new, &spec.clone().with_lambda(lambda)).unwrap();
            for ((m, a), b) in mid.iter().flatten().zip(at0.iter().flatten()).zip(at1.iter().flatten()) {
                let expect = (1.0 - lambda) * *a as f64 + lambda * *b as f64;
                assert!((*m as f64 - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn lambda_one_generation_matches_greedy() {
        let bundle = model();
        let spec = build_steering(&bundle, &prompt(&[4, 8, 15]), 2).unwrap().with_lambda(1.0);
        let g = generate_steered(&bundle, &prompt(&[1, 2]), &spec, 6).unwrap();
        assert_eq!(g.normal, g.steered);
        assert_eq!(g.differing_positions(), 0);
    }

    #[test]
    fn spec_is_not_mutated_by_use() {
        let bundle = model();
        let spec = build_steering(&bundle, &prompt(&[4, 8]), 0).unwrap();
        let before = spec.clone();
        apply_steering(&bundle, &prompt(&[1, 2, 3]), &spec).unwrap();
        generate_steered(&bundle, &prompt(&[9]), &spec, 3).unwrap();
        assert_eq!(spec, before);
    }

    #[test]
    fn rejects_bad_requests() {
        let bundle = model();
        let spec = build_steering(&bundle, &prompt(&[4, 8]), 0).unwrap();
        assert!(matches!(generate_steered(&bundle, &prompt(&[1]), &spec, 0), Err(Error::Config(_))));
        let bad = spec.clone().with_lambda(1.5);
        assert!(matches!(apply_steering(&bundle, &prompt(&[1]), &bad), Err(Error::Config(_))));
        let exact = spec.clone().with_alignment(Alignment::Exact);
        assert!(matches!(apply_steering(&bundle, &prompt(&[1, 2, 3]), &exact), Err(Error::Alignment(_))));
        assert!(build_steering(&bundle, &prompt(&[1]), 3).is_err());
    }

    #[test]
    fn first_step_only_steers_once() {
        let bundle = model();
        let spec = build_steering(&bundle, &prompt(&[30, 31]), 1)
            .unwrap()
            .with_lambda(0.0)
            .with_schedule(Schedule::FirstStepOnly);
        let p = prompt(&[5, 6]);
        let g = generate_steered(&bundle, &p, &spec, 4).unwrap();
        let mut rest = p.clone();
        rest.push(g.steered[0]);
        assert_eq!(generate_greedy(&bundle, &rest, 3).unwrap(), g.steered[1..]);
    }
}
