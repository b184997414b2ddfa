use ndarray::Array2;
use ocl::error::OclError;
use ocl::objective::*;
use ndarray::array;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tsp_closed_forms() {
    for kappa in [0.0, 1.0, 4.0, 64.0, 128.0] {
        assert_eq!(tsp_similarity(1.0f64, kappa).unwrap(), 1.0);
        assert_eq!(tsp_similarity(-1.0f64, kappa).unwrap(), 0.0);
    }
    assert_eq!(tsp_similarity(0.3f64, 0.0).unwrap(), 0.65);
    assert!((tsp_similarity(0.0f64, 64.0).unwrap() - 0.007_692_307_692).abs() < 1e-12);
    assert!((tsp_similarity(0.5f64, 4.0).unwrap() - 0.25).abs() < 1e-15);
    assert!(matches!(tsp_similarity(0.5f64, -1.0), Err(OclError::Config { .. })));
}

#[test]
fn normalize_examples() {
    let (u, n) = l2_normalize(array![[3.0f64, 4.0], [1.0, 0.0]].view()).unwrap();
    assert!((u[[0, 0]] - 0.6).abs() < 1e-15 && (u[[0, 1]] - 0.8).abs() < 1e-15);
    assert_eq!(u.row(1).to_vec(), vec![1.0, 0.0]);
    assert_eq!(n[0], 5.0);
    assert!(matches!(
        l2_normalize(array![[0.0f64, 0.0]].view()),
        Err(OclError::Numeric { .. })
    ));
}

#[test]
fn temperature_clamp() {
    assert!((temperature(10f64.ln()) - 10.0).abs() < 1e-12);
    assert_eq!(temperature(10.0f64), 100.0);
    assert_eq!(temperature_slope(10.0f64), 0.0);
}

#[test]
fn orthonormal_rows_give_closed_form_matrix() {
    let eye = Array2::<f64>::eye(3);
    let sim = similarity_matrix(eye.view(), eye.view(), 64.0, 10.0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { 10.0 } else { 10.0 * 0.5 / 65.0 };
            assert!((sim.scores[[i, j]] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_embeddings_give_log_b() {
    let y = Array2::<f64>::from_elem((4, 8), 0.3);
    let out = contrastive_loss(y.view(), y.view(), 64.0, 10f64.ln()).unwrap();
    assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    assert!((out.loss - 1.386_294).abs() < 1e-6);
}

#[test]
fn aligned_orthogonal_pair() {
    let y = Array2::<f64>::eye(2);
    let out = contrastive_loss(y.view(), y.view(), 64.0, 10f64.ln()).unwrap();
    let neg = 10.0 * 0.5 / 65.0;
    let expect = (1.0 + (neg - 10.0f64).exp()).ln();
    assert!((out.loss - expect).abs() < 1e-12);
    assert!((out.loss / 4.89e-5 - 1.0).abs() < 0.01);
}

#[test]
fn one_by_one_matrix_is_rejected() {
    let y = array![[1.0f64, 0.0]];
    assert!(matches!(
        contrastive_loss(y.view(), y.view(), 64.0, 0.0),
        Err(OclError::Config { .. })
    ));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = Array2::<f64>::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
    let l = Array2::<f64>::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
    let s = 1.7f64;
    let out = contrastive_loss(u.view(), l.view(), 4.0, s).unwrap();
    let f = |u: &Array2<f64>, l: &Array2<f64>, s: f64| contrastive_loss(u.view(), l.view(), 4.0, s).unwrap().loss;
    let h = 1e-6;
    for i in 0..4 {
        for j in 0..5 {
            let (mut a, mut b) = (u.clone(), u.clone());
            a[[i, j]] += h;
            b[[i, j]] -= h;
            let fd = (f(&a, &l, s) - f(&b, &l, s)) / (2.0 * h);
            assert!((fd - out.d_upper[[i, j]]).abs() < 1e-7);
            let (mut a, mut b) = (l.clone(), l.clone());
            a[[i, j]] += h;
            b[[i, j]] -= h;
            let fd = (f(&u, &a, s) - f(&u, &b, s)) / (2.0 * h);
            assert!((fd - out.d_lower[[i, j]]).abs() < 1e-7);
        }
    }
    let fd = (f(&u, &l, s + h) - f(&u, &l, s - h)) / (2.0 * h);
    assert!(out.d_log_tau != 0.0);
    assert!((fd - out.d_log_tau).abs() < 1e-7);
}

proptest! {
    #[test]
    fn tsp_bounded_and_monotone(c1 in -1.0f64..=1.0, c2 in -1.0f64..=1.0, k in 0.0f64..200.0) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let a = tsp_similarity(lo, k).unwrap();
        let b = tsp_similarity(hi, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        prop_assert!(a <= b);
    }

    #[test]
    fn tsp_strictly_decreasing_in_kappa(c in -0.999f64..0.999, k1 in 0.0f64..100.0, dk in 0.01f64..100.0) {
        prop_assert!(tsp_similarity(c, k1 + dk).unwrap() < tsp_similarity(c, k1).unwrap());
    }

    #[test]
    fn branch_swap_symmetry(seed in any::<u64>(), b in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array2::<f64>::from_shape_simple_fn((b, 6), || rng.random_range(-1.0..1.0));
        let l = Array2::<f64>::from_shape_simple_fn((b, 6), || rng.random_range(-1.0..1.0));
        let x = contrastive_loss(u.view(), l.view(), 64.0, 2.0).unwrap().loss;
        let y = contrastive_loss(l.view(), u.view(), 64.0, 2.0).unwrap().loss;
        prop_assert!(x >= 0.0);
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn scores_scale_with_tau(seed in any::<u64>(), tau in 0.1f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array2::<f64>::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let (m, _) = l2_normalize(y.view()).unwrap();
        let one = similarity_matrix(m.view(), m.view(), 16.0, 1.0).unwrap();
        let scaled = similarity_matrix(m.view(), m.view(), 16.0, tau).unwrap();
        for (a, b) in one.scores.iter().zip(scaled.scores.iter()) {
            prop_assert!((a * tau - b).abs() < 1e-12);
        }
        prop_assert!(one.raw.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalized_rows_have_unit_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array2::<f64>::from_shape_simple_fn((5, 7), || rng.random_range(-10.0..10.0));
        let (u, _) = l2_normalize(y.view()).unwrap();
        for row in u.rows() {
            prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
