//! The nonlinear decoder: configuration, weights, and the reference forward
//! pass every linearization is measured against.
//!
//! Architecture: pre-norm residual blocks, bias-free projections, RMSNorm,
//! rotary position embeddings, grouped-query causal attention and a gated
//! MLP. The output embedding is the final-norm hidden state at the last
//! position; the unembedding is only used for decoding.

mod ops;
pub(crate) mod pass;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{cast_vec, Scalar};

pub use ops::{
    activation, apply_gated, apply_norm, attention, attention_probs, gated_mlp, mix_values, norm_divisor, rms_norm,
    rope_rotate, APPROX_GELU_CUBIC,
};
pub use pass::{Point, Target};

/// Gate nonlinearity of the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "swiglu")]
    SwiGlu,
    #[serde(rename = "geglu")]
    GeGlu,
    /// Swish-gated MLP as shipped by some model families; same math as `SwiGlu`.
    #[serde(rename = "swish-glu")]
    SwishGlu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swiglu" => Ok(Self::SwiGlu),
            "geglu" => Ok(Self::GeGlu),
            "swish-glu" => Ok(Self::SwishGlu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub norm_eps: f64,
    pub rope_theta: f64,
    pub tie_embeddings: bool,
    /// Multiply looked-up embeddings by √d_model.
    #[serde(default)]
    pub scale_embeddings: bool,
}

impl ModelConfig {
    /// A small config in the range the test suites use.
    pub fn tiny(d_model: usize, n_layers: usize) -> Self {
        let n_heads = 4;
        Self {
            d_model,
            n_layers,
            n_heads,
            n_kv_heads: 2,
            d_head: d_model / n_heads,
            d_ff: 2 * d_model,
            vocab_size: 128,
            activation: Activation::SwiGlu,
            norm_eps: 1e-6,
            rope_theta: 10_000.0,
            tie_embeddings: false,
            scale_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.vocab_size == 0 || self.d_ff == 0 {
            return fail("d_model, d_ff and vocab_size must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "d_model ({}) must equal n_heads ({}) x d_head ({})",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!("n_heads ({}) must be divisible by n_kv_heads ({})", self.n_heads, self.n_kv_heads));
        }
        if !self.d_head.is_multiple_of(2) {
            return fail(format!("rotary embeddings need an even d_head, got {}", self.d_head));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("norm_eps must be finite and >= 0, got {}", self.norm_eps));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return fail(format!("rope_theta must be positive, got {}", self.rope_theta));
        }
        Ok(())
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Key/value head serving query head `head`.
    pub fn kv_head(&self, head: usize) -> usize {
        head / (self.n_heads / self.n_kv_heads)
    }
}

/// Weights of one decoder block. Matrices map column vectors (`out × in`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub mlp_norm: Vec<T>,
    /// Gate projection (the argument of the nonlinearity).
    pub w_gate: Matrix<T>,
    /// Linear "up" projection multiplied by the gate.
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attn_norm: vec![T::one(); d],
            w_q: Matrix::zeros(cfg.q_dim(), d),
            w_k: Matrix::zeros(cfg.kv_dim(), d),
            w_v: Matrix::zeros(cfg.kv_dim(), d),
            w_o: Matrix::zeros(d, cfg.q_dim()),
            mlp_norm: vec![T::one(); d],
            w_gate: Matrix::zeros(cfg.d_ff, d),
            w_up: Matrix::zeros(cfg.d_ff, d),
            w_down: Matrix::zeros(d, cfg.d_ff),
        }
    }

    /// Zero every attention and MLP projection, leaving the norms.
    pub fn zero_projections(&mut self) {
        for m in [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ] {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
    }

    fn cast<U: Scalar>(&self) -> LayerWeights<U> {
        LayerWeights {
            attn_norm: cast_vec(&self.attn_norm),
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            mlp_norm: cast_vec(&self.mlp_norm),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
        }
    }
}

/// Configuration plus weights. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    /// `vocab_size × d_model`.
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// `vocab_size × d_model`; `None` when the embedding table is tied.
    pub unembedding: Option<Matrix<T>>,
}

impl<T: Scalar> ModelBundle<T> {
    /// A model whose attention and MLP projections are all zero, with unit
    /// norm weights and the given tables.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers).map(|_| LayerWeights::zeros(&config)).collect();
        Ok(Self {
            embedding: Matrix::zeros(config.vocab_size, config.d_model),
            final_norm: vec![T::one(); config.d_model],
            unembedding: (!config.tie_embeddings).then(|| Matrix::zeros(config.vocab_size, config.d_model)),
            layers,
            config,
        })
    }

    pub fn unembedding(&self) -> &Matrix<T> {
        self.unembedding.as_ref().unwrap_or(&self.embedding)
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
            final_norm: cast_vec(&self.final_norm),
            unembedding: self.unembedding.as_ref().map(Matrix::cast),
        }
    }

    /// Checks every tensor against the config and rejects non-finite values.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let d = cfg.d_model;
        let expect = |name: &str, m: &Matrix<T>, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!("{name} contains non-finite values")));
            }
            Ok(())
        };
        let expect_vec = |name: &str, v: &[T]| -> Result<()> {
            if v.len() != d {
                return Err(Error::Shape(format!("{name}: expected length {d}, found {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("{name} contains non-finite values")));
            }
            Ok(())
        };
        expect("embedding", &self.embedding, (cfg.vocab_size, d))?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "config declares {} layers, bundle has {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        for (l, w) in self.layers.iter().enumerate() {
            expect_vec(&format!("layer {l} attn_norm"), &w.attn_norm)?;
            expect_vec(&format!("layer {l} mlp_norm"), &w.mlp_norm)?;
            expect(&format!("layer {l} w_q"), &w.w_q, (cfg.q_dim(), d))?;
            expect(&format!("layer {l} w_k"), &w.w_k, (cfg.kv_dim(), d))?;
            expect(&format!("layer {l} w_v"), &w.w_v, (cfg.kv_dim(), d))?;
            expect(&format!("layer {l} w_o"), &w.w_o, (d, cfg.q_dim()))?;
            expect(&format!("layer {l} w_gate"), &w.w_gate, (cfg.d_ff, d))?;
            expect(&format!("layer {l} w_up"), &w.w_up, (cfg.d_ff, d))?;
            expect(&format!("layer {l} w_down"), &w.w_down, (d, cfg.d_ff))?;
        }
        expect_vec("final_norm", &self.final_norm)?;
        match (&self.unembedding, cfg.tie_embeddings) {
            (Some(u), false) => expect("unembedding", u, (cfg.vocab_size, d))?,
            (None, true) => {}
            (Some(_), true) => return Err(Error::Config("tied embeddings but an unembedding is present".into())),
            (None, false) => return Err(Error::Config("untied embeddings but no unembedding present".into())),
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::InvalidLayer { layer, n_layers: self.config.n_layers });
        }
        Ok(())
    }
}

/// Token ids `t₀ … t_k`. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn push(&mut self, id: usize) {
        self.0.push(id);
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(Error::InvalidToken { id, vocab_size }),
            None => Ok(()),
        }
    }
}

/// Input embedding vectors `x₀ … x_k`, one per position.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<T> {
    vectors: Vec<Vec<T>>,
}

impl<T: Scalar> EmbeddingSequence<T> {
    pub fn new(vectors: Vec<Vec<T>>) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::EmptySequence);
        };
        let d = first.len();
        if d == 0 || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("embedding vectors must share a non-zero width".into()));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(len: usize, d_model: usize) -> Self {
        Self { vectors: vec![vec![T::zero(); d_model]; len] }
    }

    /// `e_j` at position `i`, zeros everywhere else.
    pub fn basis(len: usize, d_model: usize, position: usize, index: usize) -> Self {
        let mut x = Self::zeros(len, d_model);
        x.vectors[position][index] = T::one();
        x
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }

    pub fn position(&self, i: usize) -> &[T] {
        &self.vectors[i]
    }

    pub fn into_vectors(self) -> Vec<Vec<T>> {
        self.vectors
    }

    /// `α·self + β·other`.
    pub fn combine(&self, alpha: T, other: &Self, beta: T) -> Self {
        assert_eq!(self.len(), other.len());
        let vectors = self
            .vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| alpha * x + beta * y).collect())
            .collect();
        Self { vectors }
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingSequence<U> {
        EmbeddingSequence { vectors: self.vectors.iter().map(|v| cast_vec(v)).collect() }
    }

    /// FNV-1a over the little-endian bit patterns of every entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::io::Fnv1a::new();
        for v in &self.vectors {
            for x in v {
                h.write(&x.as_f64().to_le_bytes());
            }
        }
        h.finish()
    }

    pub(crate) fn check_width(&self, d_model: usize) -> Result<()> {
        if self.d_model() != d_model {
            return Err(Error::Shape(format!("embedding width {} does not match d_model {d_model}", self.d_model())));
        }
        Ok(())
    }
}

/// Final-norm hidden state at the last position.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputEmbedding<T>(pub Vec<T>);

impl<T: Scalar> OutputEmbedding<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|x| x.as_f64()).collect()
    }
}

/// Looks up embedding rows for `tokens`.
pub fn embed<T: Scalar>(bundle: &ModelBundle<T>, tokens: &TokenSequence) -> Result<EmbeddingSequence<T>> {
    let cfg = &bundle.config;
    tokens.check_vocab(cfg.vocab_size)?;
    let scale = if cfg.scale_embeddings { (cfg.d_model as f64).sqrt() } else { 1.0 };
    let vectors = tokens
        .ids()
        .iter()
        .map(|&t| {
            let row = bundle.embedding.row(t);
            if cfg.scale_embeddings {
                row.iter().map(|&v| T::of_f64(v.as_f64() * scale)).collect()
            } else {
                row.to_vec()
            }
        })
        .collect();
    EmbeddingSequence::new(vectors)
}

/// The nonlinear decoder `y = f(x₀, …, x_k)`.
pub fn forward<T: Scalar>(bundle: &ModelBundle<T>, x: &EmbeddingSequence<T>) -> Result<OutputEmbedding<T>> {
    pass::Pass::live(bundle).run(x, Target::Output).map(OutputEmbedding)
}

/// Live forward pass up to an arbitrary target, returning its value at the
/// last position.
pub fn forward_to<T: Scalar>(bundle: &ModelBundle<T>, x: &EmbeddingSequence<T>, target: Target) -> Result<Vec<T>> {
    pass::Pass::live(bundle).run(x, target)
}

/// Unembedding logits `U_emb · y`, in `f64`.
pub fn logits<T: Scalar>(bundle: &ModelBundle<T>, y: &[T]) -> Vec<f64> {
    bundle.unembedding().matvec_f64(y)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_next_token<T: Scalar>(bundle: &ModelBundle<T>, tokens: &TokenSequence) -> Result<usize> {
    let x = embed(bundle, tokens)?;
    let y = forward(bundle, &x)?;
    Ok(argmax(&logits(bundle, y.as_slice())))
}

/// Greedy continuation of `prompt` by `n_tokens` tokens.
pub fn generate_greedy<T: Scalar>(
    bundle: &ModelBundle<T>,
    prompt: &TokenSequence,
    n_tokens: usize,
) -> Result<Vec<usize>> {
    let mut tokens = prompt.clone();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let next = greedy_next_token(bundle, &tokens)?;
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}
