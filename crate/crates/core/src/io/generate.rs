//! Seeded tiny models.
//!
//! Random draws come from SplitMix64 (`rand_xoshiro::SplitMix64`), consumed
//! as uniform `f64` in `[0, 1)` in a fixed tensor order: embedding, then per
//! layer `attn_norm, w_q, w_k, w_v, w_o, mlp_norm, w_gate, w_up, w_down`,
//! then `final_norm` and `unembedding`. Each matrix is filled row-major.
//! Projections are uniform with unit output variance for unit-variance
//! inputs; norm weights are `1 ± 0.2`.
//!
//! The trained mode additionally fits the unembedding by softmax regression
//! on the model's own output embeddings over [`CORPUS`], so greedy
//! continuations follow the corpus.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{embed, forward, LayerWeights, ModelBundle, ModelConfig, TokenSequence};
use crate::scalar::cast_vec;

use super::vocab::ToyVocab;

/// Sentences for the trained mode; also the source of the toy vocabulary.
pub const CORPUS: &[&str] = &[
    "the golden gate bridge is in san francisco",
    "the bridge out of marin is the most famous bridge",
    "here is a painting of the sea",
    "i went to new york to see the museum",
    "i am going to arizona to see the grand canyon",
    "the grand canyon is a long hike",
    "the museum is a moving place",
    "a painting of the golden gate bridge",
    "we drove over the bridge to marin",
    "the sea is calm and blue",
];

const READOUT_STEPS: usize = 3000;
const READOUT_LR: f64 = 0.5;
const READOUT_DECAY: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitMode {
    Random,
    /// Random body with an unembedding fitted to the corpus.
    Trained,
}

struct Init(SplitMix64);

impl Init {
    fn uniform(&mut self, scale: f64) -> f32 {
        ((2.0 * self.0.random::<f64>() - 1.0) * scale) as f32
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix<f32> {
        let scale = (3.0 / cols as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| self.uniform(scale))
    }

    fn norm(&mut self, d: usize) -> Vec<f32> {
        (0..d).map(|_| 1.0 + self.uniform(0.2)).collect()
    }
}

pub fn make_tiny_model(seed: u64, config: &ModelConfig, mode: InitMode) -> Result<ModelBundle<f32>> {
    config.validate()?;
    let cfg = config.clone();
    let d = cfg.d_model;
    let mut init = Init(SplitMix64::seed_from_u64(seed));

    let embedding = Matrix::from_fn(cfg.vocab_size, d, |_, _| init.uniform(3f64.sqrt()));
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            attn_norm: init.norm(d),
            w_q: init.matrix(cfg.q_dim(), d),
            w_k: init.matrix(cfg.kv_dim(), d),
            w_v: init.matrix(cfg.kv_dim(), d),
            w_o: init.matrix(d, cfg.q_dim()),
            mlp_norm: init.norm(d),
            w_gate: init.matrix(cfg.d_ff, d),
            w_up: init.matrix(cfg.d_ff, d),
            w_down: init.matrix(d, cfg.d_ff),
        })
        .collect();
    let final_norm = init.norm(d);
    let unembedding = (!cfg.tie_embeddings).then(|| init.matrix(cfg.vocab_size, d));
    let mut bundle = ModelBundle { config: cfg, embedding, layers, final_norm, unembedding };
    bundle.validate()?;

    if mode == InitMode::Trained {
        fit_readout(&mut bundle)?;
    }
    Ok(bundle)
}

/// Every `(prefix, next token)` pair of the corpus, prefixes starting at
/// `<bos>`.
pub fn corpus_examples(vocab: &ToyVocab) -> Result<Vec<(TokenSequence, usize)>> {
    let mut out = Vec::new();
    for sentence in CORPUS {
        let ids = vocab.encode(sentence, true)?;
        let ids = ids.ids();
        for end in 1..ids.len() {
            out.push((TokenSequence::new(ids[..end].to_vec())?, ids[end]));
        }
    }
    Ok(out)
}

fn fit_readout(bundle: &mut ModelBundle<f32>) -> Result<()> {
    let cfg = &bundle.config;
    if cfg.tie_embeddings {
        return Err(Error::Config("trained mode fits the unembedding and needs untied embeddings".into()));
    }
    let vocab = ToyVocab::new(cfg.vocab_size);
    let examples = corpus_examples(&vocab)
        .map_err(|e| Error::Config(format!("vocabulary of {} tokens cannot encode the corpus: {e}", cfg.vocab_size)))?;
    let (v, d) = (cfg.vocab_size, cfg.d_model);

    let features: Vec<Vec<f64>> = examples
        .iter()
        .map(|(prefix, _)| {
            let y = forward(bundle, &embed(bundle, prefix)?)?;
            Ok(y.as_f64())
        })
        .collect::<Result<_>>()?;

    // Softmax regression, full batch.
    let n = examples.len() as f64;
    let mut w = vec![0.0f64; v * d];
    let mut grad = vec![0.0f64; v * d];
    let mut logits = vec![0.0f64; v];
    for _ in 0..READOUT_STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, (_, target)) in features.iter().zip(&examples) {
            for (t, l) in logits.iter_mut().enumerate() {
                *l = w[t * d..(t + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (t, l) in logits.iter().enumerate() {
                let p = (l - max).exp() / total - if t == *target { 1.0 } else { 0.0 };
                for (g, xi) in grad[t * d..(t + 1) * d].iter_mut().zip(x) {
                    *g += p * xi / n;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= READOUT_LR * (gi + READOUT_DECAY * *wi);
        }
    }
    bundle.unembedding = Some(Matrix::from_vec(v, d, cast_vec(&w))?);
    Ok(())
}
