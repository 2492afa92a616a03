#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::*;
use crate::io::{make_tiny_model, InitMode};
use crate::model::{embed, ModelConfig, TokenSequence};

fn random(seed: u64, rows: usize, cols: usize) -> Matrix<f64> {
    let mut r = SplitMix64::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn oracle_singular_values(m: &Matrix<f64>) -> Vec<f64> {
    let na = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut s: Vec<f64> = na.singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn orthonormality_error(m: &Matrix<f64>) -> f64 {
    m.transpose().matmul(m).max_abs_diff(&Matrix::identity(m.cols()))
}

fn check_contracts(m: &Matrix<f64>) {
    let d = svd_full(m).unwrap();
    assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
    assert!(d.singular_values.iter().all(|&s| s >= 0.0));
    assert!(orthonormality_error(&d.u) <= 1e-5);
    assert!(orthonormality_error(&d.v) <= 1e-5);
    if m.frobenius() > 0.0 {
        assert!(d.reconstruct().rel_frobenius_diff(m) <= 1e-5);
    }
    for c in 0..d.u.cols() {
        let col = d.u.col(c);
        let big = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        assert!(big >= 0.0);
    }
}

#[test]
fn diagonal_matrix() {
    let m = Matrix::from_diag(&[3.0, 2.0, 1.0]);
    let d = svd_full(&m).unwrap();
    assert_eq!(d.singular_values, vec![3.0, 2.0, 1.0]);
    for k in 0..3 {
        assert!((d.u[(k, k)].abs() - 1.0).abs() < 1e-15);
        assert!((d.v[(k, k)].abs() - 1.0).abs() < 1e-15);
    }
    let m = Matrix::from_diag(&[1.0, 3.0, 2.0]);
    let d = svd_full(&m).unwrap();
    assert_eq!(d.singular_values, vec![3.0, 2.0, 1.0]);
    assert_eq!(d.u.col(0), vec![0.0, 1.0, 0.0]);
}

#[test]
fn identity_has_full_stable_rank() {
    for n in [1, 4, 32] {
        let d = svd_full(&Matrix::<f64>::identity(n)).unwrap();
        assert!(d.singular_values.iter().all(|&s| s == 1.0));
        assert_eq!(stable_rank(&d.singular_values).unwrap(), n as f64);
    }
}

#[test]
fn matches_the_nalgebra_spectrum() {
    for (seed, shape) in [(1, (32, 32)), (2, (20, 7)), (3, (7, 20)), (4, (64, 64))] {
        let m = random(seed, shape.0, shape.1);
        let ours = svd_full(&m).unwrap().singular_values;
        let theirs = oracle_singular_values(&m);
        let max = theirs[0];
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-8 * max, "{a} vs {b}");
        }
        check_contracts(&m);
    }
}

#[test]
fn rank_deficient_and_zero_matrices() {
    let a = random(5, 12, 2);
    let b = random(6, 2, 9);
    let m = a.matmul(&b);
    let d = svd_full(&m).unwrap();
    assert!(d.singular_values[2..].iter().all(|&s| s == 0.0));
    check_contracts(&m);
    let z = Matrix::<f64>::zeros(4, 3);
    let d = svd_full(&z).unwrap();
    assert!(d.singular_values.iter().all(|&s| s == 0.0));
    assert!(orthonormality_error(&d.u) <= 1e-12);
    assert!(matches!(stable_rank(&d.singular_values), Err(Error::UndefinedRank)));
}

#[test]
fn f32_input_is_decomposed_in_double() {
    let m = random(7, 16, 16);
    let m32: Matrix<f32> = m.cast();
    let ours = svd_full(&m32).unwrap().singular_values;
    let theirs = oracle_singular_values(&m32.cast());
    for (a, b) in ours.iter().zip(&theirs) {
        assert!((a - b).abs() <= 1e-10 * theirs[0]);
    }
}

#[test]
fn retained_panels() {
    let m = random(8, 10, 6);
    let s = svd(&m, 3).unwrap();
    assert_eq!(s.singular_values.len(), 6);
    assert_eq!(s.u.shape(), (10, 3));
    assert_eq!(s.v.shape(), (6, 3));
    assert!(orthonormality_error(&s.u) <= 1e-5);
    assert!(svd(&m, 0).is_err());
    assert!(svd(&m, 7).is_err());
    let mut bad = m.clone();
    bad[(1, 1)] = f64::NAN;
    assert!(svd(&bad, 2).unwrap_err().is_numeric());
}

#[test]
fn stable_rank_examples() {
    assert_eq!(stable_rank(&[1.0, 1.0, 1.0]).unwrap(), 3.0);
    assert_eq!(stable_rank(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(stable_rank(&[2.0, 1.0]).unwrap(), 1.25);
    assert!(matches!(stable_rank(&[0.0, 0.0]), Err(Error::UndefinedRank)));
    assert!(matches!(stable_rank(&[]), Err(Error::UndefinedRank)));
    assert!(stable_rank(&[1.0, -1.0]).is_err());
}

#[test]
fn normalizations() {
    let s = [4.0, 3.0, 0.0];
    assert_eq!(normalize_by_max(&s), vec![1.0, 0.75, 0.0]);
    assert_eq!(normalize_by_frobenius(&s), vec![0.8, 0.6, 0.0]);
    assert_eq!(normalize_by_max(&[0.0, 0.0]), vec![0.0, 0.0]);
}

#[test]
fn projections() {
    let d = svd_full(&random(9, 16, 16)).unwrap();
    let self_proj = project_onto_final(&d.u, &d.u).unwrap();
    assert!((self_proj[0][0] - 1.0).abs() < 1e-12 && (self_proj[1][1] - 1.0).abs() < 1e-12);
    assert!(self_proj[0][1] < 1e-12 && self_proj[1][0] < 1e-12);

    let left = Matrix::from_cols(16, &[d.u.col(0), d.u.col(1)]);
    let right = Matrix::from_cols(16, &[d.u.col(2), d.u.col(3)]);
    assert!(project_onto_final(&left, &right).unwrap().iter().flatten().all(|&v| v < 1e-12));

    let other = svd_full(&random(10, 16, 16)).unwrap();
    let p = project_onto_final(&d.u, &other.u).unwrap();
    for a in 0..2 {
        for b in 0..2 {
            let mut dot = 0.0;
            for i in 0..16 {
                dot += d.u[(i, a)] * other.u[(i, b)];
            }
            assert!((p[a][b] - dot.abs()).abs() <= 1e-12);
            assert!(p[a][b] <= 1.0 + 1e-6);
        }
    }
    assert!(project_onto_final(&d.u, &Matrix::zeros(15, 2)).is_err());
    assert!(project_onto_final(&Matrix::from_cols(16, &[d.u.col(0)]), &d.u).is_err());
}

#[test]
fn zero_weight_profile_is_flat() {
    let mut b = make_tiny_model(11, &ModelConfig::tiny(32, 3), InitMode::Random).unwrap();
    for l in &mut b.layers {
        l.zero_projections();
    }
    let x = embed(&b, &TokenSequence::new(vec![5]).unwrap()).unwrap();
    let report = spectrum_profile(&b, &x, &ProfileOptions::default()).unwrap();
    let ranks: Vec<f64> =
        report.series(Point::LayerOut, TransformScope::Cumulative).map(|e| e.stable_rank.unwrap()).collect();
    assert_eq!(ranks.len(), 3);
    assert!(ranks.iter().all(|&r| (r - ranks[0]).abs() < 1e-9));
    assert!(report.series(Point::AttnOut, TransformScope::PerLayer).all(|e| e.stable_rank.is_none()));
}

#[test]
fn profile_ranks_are_bounded() {
    let b = make_tiny_model(12, &ModelConfig::tiny(32, 2), InitMode::Trained).unwrap();
    let x = embed(&b, &TokenSequence::new(vec![0, 3, 4]).unwrap()).unwrap();
    let report = spectrum_profile(&b, &x, &ProfileOptions::default()).unwrap();
    assert_eq!(report.entries.len(), 2 * 3 * 2 * 3);
    for e in &report.entries {
        if let Some(r) = e.stable_rank {
            assert!((1.0..=32.0 + 1e-9).contains(&r), "{r}");
        }
        assert_eq!(e.singular_values.len(), 32);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stable_rank_is_scale_invariant(s in prop::collection::vec(0.0f64..10.0, 1..20), exp in -20i32..20, alpha in 0.01f64..100.0) {
        prop_assume!(s.iter().any(|&v| v > 0.0));
        let base = stable_rank(&s).unwrap();
        let pow2 = 2f64.powi(exp);
        let scaled: Vec<f64> = s.iter().map(|v| v * pow2).collect();
        prop_assert_eq!(stable_rank(&scaled).unwrap(), base);
        let scaled: Vec<f64> = s.iter().map(|v| v * alpha).collect();
        prop_assert!((stable_rank(&scaled).unwrap() - base).abs() <= 1e-12 * base);
        prop_assert!(base >= 1.0 && base <= s.len() as f64);
    }

    #[test]
    fn low_rank_products_have_low_stable_rank(seed in 0u64..10_000, r in 1usize..5) {
        let m = random(seed, 24, r).matmul(&random(seed + 1, r, 24));
        let sr = stable_rank(&svd_full(&m).unwrap().singular_values).unwrap();
        prop_assert!(sr <= r as f64 + 1e-6);
    }

    #[test]
    fn decompositions_satisfy_contracts(seed in 0u64..10_000, rows in 1usize..20, cols in 1usize..20) {
        check_contracts(&random(seed, rows, cols));
    }
}
