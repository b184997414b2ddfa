use ndarray::{Array1, Array2, Axis};
use ocl::encoder::layers::*;
use ndarray::array;

#[test]
fn layer_norm_rows_are_standardized() {
    let x = array![[1.0f64, 2.0, 3.0, 4.0], [-2.0, 0.0, 2.0, 8.0]];
    let g = Array1::ones(4);
    let b = Array1::zeros(4);
    let (y, _) = layer_norm(x.view(), g.view(), b.view());
    for row in y.rows() {
        assert!(row.sum().abs() < 1e-12);
        let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn gelu_reference_points() {
    let x = array![[0.0f64, 1.0, -1.0]];
    let y = gelu(x.view());
    assert_eq!(y[[0, 0]], 0.0);
    assert!((y[[0, 1]] - 0.841_344_746_068_542_9).abs() < 1e-12);
    assert!((y[[0, 2]] + 0.158_655_253_931_457_05).abs() < 1e-12);
}

#[test]
fn gelu_derivative_matches_central_difference() {
    let x = array![[-2.5f64, -0.3, 0.0, 0.7, 3.1]];
    let g = gelu_backward(x.view(), Array2::ones((1, 5)).view());
    let h = 1e-6;
    for j in 0..5 {
        let mut a = x.clone();
        let mut b = x.clone();
        a[[0, j]] += h;
        b[[0, j]] -= h;
        let fd = (gelu(a.view())[[0, j]] - gelu(b.view())[[0, j]]) / (2.0 * h);
        assert!((fd - g[[0, j]]).abs() < 1e-8);
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut x = array![[1000.0f64, 1000.0], [0.0, f64::ln(3.0)]];
    softmax_rows_inplace(x.view_mut());
    assert_eq!(x[[0, 0]], 0.5);
    assert!((x[[1, 1]] - 0.75).abs() < 1e-12);
}

#[test]
fn batch_norm_uses_running_stats_when_given() {
    let x = array![[1.0f64, 2.0], [3.0, 6.0]];
    let m = array![1.0, 2.0];
    let v = array![4.0, 16.0];
    let (y, cache) = batch_norm(x.view(), None, None, Some((m.view(), v.view())));
    assert!(!cache.used_batch_stats);
    assert!((y[[1, 0]] - 2.0 / (4.0f64 + BATCH_NORM_EPS).sqrt()).abs() < 1e-12);
    let (y, cache) = batch_norm(x.view(), None, None, None);
    assert!(cache.used_batch_stats);
    assert!(y.sum_axis(Axis(0)).iter().all(|v| v.abs() < 1e-12));
}
