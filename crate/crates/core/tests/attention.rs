use linear_kv::attention::*;
use linear_kv::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RowMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    RowMatrix::new(rows, cols, data).unwrap()
}

#[test]
fn softmax_symmetric_pair() {
    let m = RowMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
    let s = softmax_rows(&m).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_ln3() {
    // e^{ln 3} / (e^{ln 3} + e^0) = 3/4
    let m = RowMatrix::new(1, 2, vec![3.0f32.ln(), 0.0]).unwrap();
    let s = softmax_rows(&m).unwrap();
    assert!((s.get(0, 0) - 0.75).abs() < 1e-6);
    assert!((s.get(0, 1) - 0.25).abs() < 1e-6);
}

#[test]
fn softmax_large_logits_do_not_overflow() {
    let m = RowMatrix::new(1, 3, vec![1000.0; 3]).unwrap();
    let s = softmax_rows(&m).unwrap();
    for &x in s.data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_empty_domain() {
    let m = RowMatrix::zeros(2, 0);
    assert_eq!(softmax_rows(&m), Err(Error::EmptySoftmaxDomain));
}

#[test]
fn rejects_non_finite() {
    assert_eq!(
        RowMatrix::new(1, 2, vec![f32::NAN, 0.0]),
        Err(Error::NonFinite)
    );
}

#[test]
fn single_key_returns_its_value() {
    let q = RowMatrix::new(1, 3, vec![0.3, -2.0, 1.0]).unwrap();
    let k = RowMatrix::new(1, 3, vec![5.0, 1.0, -1.0]).unwrap();
    let v = RowMatrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
    let out = attention(&q, &k, &v, default_scale(3)).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn orthogonal_query_averages_values() {
    let q = RowMatrix::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    let k = RowMatrix::new(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
    let v = RowMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
    let out = attention(&q, &k, &v, default_scale(3)).unwrap();
    assert_eq!(out.data(), &[2.0, 3.0, 4.0]);
}

#[test]
fn matches_naive_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, m) = (4, 5);
    let q = random_matrix(&mut rng, 1, d);
    let k = random_matrix(&mut rng, m, d);
    let v = random_matrix(&mut rng, m, d);
    let out = attention(&q, &k, &v, default_scale(d)).unwrap();
    let expected = linear_kv::oracle::naive_attention(q.row(0), &k, &v, 1.0 / (d as f64).sqrt());
    for (a, b) in out.data().iter().zip(&expected) {
        assert!((f64::from(*a) - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn shape_errors() {
    let q = RowMatrix::zeros(1, 3);
    let k = RowMatrix::zeros(2, 4);
    let v = RowMatrix::zeros(2, 4);
    assert!(matches!(
        attention(&q, &k, &v, 1.0),
        Err(Error::ShapeMismatch(_))
    ));
    let k = RowMatrix::zeros(0, 3);
    let v = RowMatrix::zeros(0, 3);
    assert_eq!(attention(&q, &k, &v, 1.0), Err(Error::EmptyCache));
}

proptest! {
    #[test]
    fn output_in_convex_hull(seed in any::<u64>(), m in 1usize..12, d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_matrix(&mut rng, 1, d);
        let k = random_matrix(&mut rng, m, d);
        let v = random_matrix(&mut rng, m, d);
        let out = attention(&q, &k, &v, default_scale(d)).unwrap();
        for c in 0..d {
            let lo = (0..m).map(|r| v.get(r, c)).fold(f32::INFINITY, f32::min);
            let hi = (0..m).map(|r| v.get(r, c)).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(out.get(0, c) >= lo - 1e-6 && out.get(0, c) <= hi + 1e-6);
        }
    }

    #[test]
    fn softmax_shift_invariant(seed in any::<u64>(), cols in 1usize..16, shift in -50.0f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, 3, cols);
        let shifted = RowMatrix::new(3, cols, m.data().iter().map(|x| x + shift).collect()).unwrap();
        let a = softmax_rows(&m).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        for r in 0..3 {
            let s: f32 = a.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    /// Duplicating every key/value pair leaves the output unchanged: each
    /// copy takes half of the original weight.
    #[test]
    fn duplicated_pairs_match_deduplicated(seed in any::<u64>(), m in 1usize..8, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_matrix(&mut rng, 1, d);
        let k = random_matrix(&mut rng, m, d);
        let v = random_matrix(&mut rng, m, d);
        let dup = |x: &RowMatrix| {
            let rows: Vec<Vec<f32>> = (0..x.rows()).flat_map(|r| [x.row(r).to_vec(), x.row(r).to_vec()]).collect();
            RowMatrix::from_rows(&rows).unwrap()
        };
        let a = attention(&q, &k, &v, default_scale(d)).unwrap();
        let b = attention(&q, &dup(&k), &dup(&v), default_scale(d)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}
