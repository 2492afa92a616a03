use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::*;
use crate::io::{make_tiny_model, InitMode};
use crate::model::ModelConfig;
use crate::spectra::svd;

fn setup(seed: u64) -> (ModelBundle<f32>, ToyVocab) {
    let cfg = ModelConfig::tiny(32, 1);
    let vocab = ToyVocab::new(cfg.vocab_size);
    (make_tiny_model(seed, &cfg, InitMode::Random).unwrap(), vocab)
}

fn random_vec(seed: u64, n: usize) -> Vec<f32> {
    let mut r = SplitMix64::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Brute-force scan: repeatedly take the best remaining id, lowest id on ties.
fn brute_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
        out.push(best.unwrap());
    }
    out
}

fn brute_cosine(table: &Matrix<f32>, v: &[f32]) -> Vec<f64> {
    let vn: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    (0..table.rows())
        .map(|t| {
            let row = table.row(t);
            let mut d = 0.0;
            let mut rn = 0.0;
            for (a, b) in row.iter().zip(v) {
                d += *a as f64 * *b as f64;
                rn += (*a as f64).powi(2);
            }
            if rn == 0.0 {
                0.0
            } else {
                d / (rn.sqrt() * vn)
            }
        })
        .collect()
}

#[test]
fn input_decoding_matches_brute_force() {
    let (b, vocab) = setup(1);
    for seed in 0..10 {
        let v = random_vec(100 + seed, 32);
        let got = nearest_input_tokens(&v, &b, &vocab, 5, Metric::Cosine).unwrap();
        assert_eq!(got.ids(), brute_top_k(&brute_cosine(&b.embedding, &v), 5));
        assert_eq!(got.space, Space::InputEmbedding);
        assert_eq!(got.texts()[0], vocab.token(got.ids()[0]));
    }
}

#[test]
fn an_embedding_row_decodes_to_itself() {
    let (b, vocab) = setup(2);
    for t in [0, 5, 77, 127] {
        let row = b.embedding.row(t).to_vec();
        for metric in [Metric::Cosine, Metric::Euclidean] {
            assert_eq!(nearest_input_tokens(&row, &b, &vocab, 1, metric).unwrap().ids(), vec![t]);
        }
    }
}

#[test]
fn output_decoding_ranks_by_logit() {
    let (b, vocab) = setup(3);
    let v = random_vec(3, 32);
    let got = decode_output_direction(&v, &b, &vocab, 7).unwrap();
    let u = b.unembedding();
    let logits: Vec<f64> =
        (0..u.rows()).map(|t| u.row(t).iter().zip(&v).map(|(a, c)| *a as f64 * *c as f64).sum()).collect();
    assert_eq!(got.ids(), brute_top_k(&logits, 7));
    assert!(got.entries.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn ties_go_to_the_lowest_id() {
    assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0, 3.0], 3), vec![1, 2, 4]);
    let mut cfg = ModelConfig::tiny(8, 1);
    cfg.vocab_size = 10;
    let mut b = ModelBundle::<f32>::zeros(cfg).unwrap();
    b.embedding = Matrix::from_fn(10, 8, |i, j| if j == 0 && (i == 2 || i == 7) { 1.0 } else { 0.0 });
    let vocab = ToyVocab::new(10);
    let mut v = vec![0.0f32; 8];
    v[0] = 1.0;
    assert_eq!(nearest_input_tokens(&v, &b, &vocab, 2, Metric::Dot).unwrap().ids(), vec![2, 7]);
}

#[test]
fn zero_direction_is_undefined() {
    let (b, vocab) = setup(4);
    let z = vec![0.0f32; 32];
    assert!(matches!(nearest_input_tokens(&z, &b, &vocab, 3, Metric::Cosine), Err(Error::UndefinedDirection)));
    assert!(matches!(nearest_input_tokens(&z[..5], &b, &vocab, 3, Metric::Cosine), Err(Error::Shape(_))));
}

#[test]
fn rows_and_columns_by_norm() {
    let (b, vocab) = setup(5);
    let mut block = Matrix::from_fn(32, 32, |i, j| ((i * 7 + j * 3) % 11) as f32 - 5.0);
    for j in 0..32 {
        block[(4, j)] = 0.0;
    }
    let rows = top_rows_by_norm(&block, 32, &b, &vocab, 3, Metric::Cosine).unwrap();
    let norms: Vec<f64> = (0..32).map(|i| crate::linalg::norm(block.row(i))).collect();
    assert_eq!(rows.iter().map(|r| r.index).collect::<Vec<_>>(), brute_top_k(&norms, 32));
    let zero = rows.iter().find(|r| r.index == 4).unwrap();
    assert!(zero.decoding.is_none());
    let first = &rows[0];
    let expect = nearest_input_tokens(block.row(first.index), &b, &vocab, 3, Metric::Cosine).unwrap();
    assert_eq!(first.decoding.as_ref().unwrap().ids(), expect.ids());

    let cols = top_cols_by_norm(&block, 4, &b, &vocab, 3).unwrap();
    let cnorms: Vec<f64> = (0..32).map(|j| crate::linalg::norm(&block.col(j))).collect();
    assert_eq!(cols.iter().map(|c| c.index).collect::<Vec<_>>(), brute_top_k(&cnorms, 4));
    assert_eq!(cols[0].decoding.as_ref().unwrap().space, Space::OutputUnembedding);
}

#[test]
fn svd_panels_decode_both_signs() {
    let (b, vocab) = setup(6);
    let m = Matrix::from_fn(32, 32, |i, j| ((i + 2 * j) % 5) as f32 - 2.0 + if i == j { 3.0 } else { 0.0 });
    let s = svd(&m, 3).unwrap();
    let panels = decode_svd_panels(&s, &b, &vocab, 4, Metric::Cosine, LeftSpace::Unembedding).unwrap();
    assert_eq!(panels.len(), 3);
    for (c, p) in panels.iter().enumerate() {
        let u: Vec<f32> = s.u.col(c).iter().map(|&x| x as f32).collect();
        let neg: Vec<f32> = u.iter().map(|x| -x).collect();
        assert_eq!(p.u_positive.ids(), decode_output_direction(&u, &b, &vocab, 4).unwrap().ids());
        assert_eq!(p.u_negative.ids(), decode_output_direction(&neg, &b, &vocab, 4).unwrap().ids());
        let v: Vec<f32> = s.v.col(c).iter().map(|&x| x as f32).collect();
        assert_eq!(p.v_positive.ids(), nearest_input_tokens(&v, &b, &vocab, 4, Metric::Cosine).unwrap().ids());
        assert_eq!(p.singular_value, s.singular_values[c]);
    }
    let local = decode_svd_panels(&s, &b, &vocab, 4, Metric::Cosine, LeftSpace::InputEmbedding).unwrap();
    assert_eq!(local[0].u_positive.space, Space::InputEmbedding);
}

#[test]
fn markdown_grid() {
    let header = vec!["layer".to_string(), "pos 0".to_string(), "pos 1".to_string()];
    let rows = vec![("0".to_string(), vec![vec!["a".to_string(), "b".to_string()], vec!["|".to_string()]])];
    let md = token_table_markdown(&header, &rows);
    assert_eq!(md, "| layer | pos 0 | pos 1 |\n| --- | --- | --- |\n| 0 | a, b | \\| |\n");
}

fn identity_model(d: usize) -> (ModelBundle<f32>, ToyVocab) {
    let mut cfg = ModelConfig::tiny(d, 1);
    cfg.vocab_size = d;
    let mut b = ModelBundle::<f32>::zeros(cfg).unwrap();
    b.embedding = Matrix::identity(d);
    b.unembedding = Some(Matrix::identity(d));
    (b, ToyVocab::new(d))
}

#[test]
fn negated_rows_decode_to_their_partner() {
    let mut cfg = ModelConfig::tiny(8, 1);
    cfg.vocab_size = 16;
    let mut b = ModelBundle::<f32>::zeros(cfg).unwrap();
    let base = random_vec(9, 64);
    b.embedding = Matrix::from_fn(16, 8, |i, j| if i < 8 { base[i * 8 + j] } else { -base[(i - 8) * 8 + j] });
    let vocab = ToyVocab::new(16);
    for t in 0..8 {
        let neg: Vec<f32> = b.embedding.row(t).iter().map(|v| -v).collect();
        let d = nearest_input_tokens(&neg, &b, &vocab, 1, Metric::Cosine).unwrap();
        assert_eq!(d.ids(), vec![t + 8]);
        assert!((d.entries[0].score - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identity_unembedding_and_zero_direction() {
    let (b, vocab) = identity_model(8);
    let mut e5 = vec![0.0f32; 8];
    e5[5] = 1.0;
    assert_eq!(decode_output_direction(&e5, &b, &vocab, 1).unwrap().ids(), vec![5]);
    assert_eq!(decode_output_direction(&[0.0f32; 8], &b, &vocab, 3).unwrap().ids(), vec![0, 1, 2]);
}

#[test]
fn diagonal_blocks_rank_rows_and_columns() {
    let (b, vocab) = identity_model(8);
    let mut diag = vec![1.0f32; 8];
    diag[0] = 3.0;
    let rows = top_rows_by_norm(&Matrix::from_diag(&diag), 2, &b, &vocab, 1, Metric::Cosine).unwrap();
    assert_eq!((rows[0].index, rows[0].norm), (0, 3.0));
    assert_eq!(rows[1].index, 1);

    let mut diag = vec![0.0f32; 8];
    diag[1] = 5.0;
    let cols = top_cols_by_norm(&Matrix::from_diag(&diag), 2, &b, &vocab, 1).unwrap();
    assert_eq!(cols[0].index, 1);
    assert_eq!(cols[0].decoding.as_ref().unwrap().ids(), vec![1]);
    assert!(cols[1].decoding.is_none());

    let dup = Matrix::from_fn(8, 8, |i, j| if i == 0 && (j == 3 || j == 6) { 2.0 } else { 0.0 });
    let cols = top_cols_by_norm(&dup, 2, &b, &vocab, 1).unwrap();
    assert_eq!((cols[0].index, cols[1].index), (3, 6));

    let zero = top_rows_by_norm(&Matrix::zeros(8, 8), 8, &b, &vocab, 1, Metric::Cosine).unwrap();
    assert!(zero.iter().all(|r| r.norm == 0.0 && r.decoding.is_none()));
}

#[test]
fn panels_of_simple_maps() {
    let (b, vocab) = identity_model(8);
    let s = svd(&Matrix::<f32>::from_diag(&[1.0, 7.0, 2.0, 0.5, 0.0, 0.0, 0.0, 0.0]), 2).unwrap();
    let p = decode_svd_panels(&s, &b, &vocab, 1, Metric::Cosine, LeftSpace::Unembedding).unwrap();
    assert_eq!(p[0].u_positive.ids(), vec![1]);
    assert_eq!(p[0].v_positive.ids(), vec![1]);
    assert_eq!(p[1].u_positive.ids(), vec![2]);

    let (b, vocab) = setup(7);
    let a = b.unembedding().row(40).to_vec();
    let c = b.embedding.row(90).to_vec();
    let rank1 = Matrix::from_fn(32, 32, |i, j| a[i] * c[j]);
    let s = svd(&rank1, 1).unwrap();
    let p = decode_svd_panels(&s, &b, &vocab, 3, Metric::Cosine, LeftSpace::Unembedding).unwrap();
    let (pu, nu) = (&p[0].u_positive, &p[0].u_negative);
    let expect_a = decode_output_direction(&a, &b, &vocab, 3).unwrap().ids();
    assert!(pu.ids() == expect_a || nu.ids() == expect_a);
    let v_hit = p[0].v_positive.ids()[0] == 90 || p[0].v_negative.ids()[0] == 90;
    assert!(v_hit);
}

#[test]
fn permuting_the_vocabulary_permutes_the_ids() {
    let (b, vocab) = setup(8);
    let n = b.config.vocab_size;
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let mut pb = b.clone();
    pb.embedding = Matrix::from_fn(n, 32, |i, j| b.embedding[(perm[i], j)]);
    let v = random_vec(10, 32);
    let orig = nearest_input_tokens(&v, &b, &vocab, 5, Metric::Cosine).unwrap().ids();
    let permuted = nearest_input_tokens(&v, &pb, &vocab, 5, Metric::Cosine).unwrap().ids();
    let mapped: Vec<usize> = permuted.iter().map(|&i| perm[i]).collect();
    assert_eq!(mapped, orig);
}
