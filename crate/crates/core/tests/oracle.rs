use ocl::oracle::*;

#[test]
fn scalar_reference_points() {
    assert_eq!(tsp_scalar(1.0, 64.0), 1.0);
    assert_eq!(tsp_scalar(-1.0, 64.0), 0.0);
    assert!((tsp_scalar(0.0, 64.0) - 0.5 / 65.0).abs() < 1e-18);
}

#[test]
fn bruteforce_uniform_rows() {
    let v = vec![vec![1.0, 2.0, 3.0]; 5];
    assert!((bruteforce_loss(&v, &v, 64.0, 10.0) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn bruteforce_aligned_pair() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let got = bruteforce_loss(&e, &e, 64.0, 10.0);
    assert!((got / 4.89e-5 - 1.0).abs() < 0.01, "{got}");
}

#[test]
fn finite_diff_of_quadratic() {
    let point = vec![1.0, -2.0, 0.5];
    let spans = vec![
        TensorSpan { name: "a".into(), offset: 0, len: 2 },
        TensorSpan { name: "b".into(), offset: 2, len: 1 },
    ];
    let f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
    let good: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
    let r = finite_diff_grad(f, &point, &spans, &good, 1e-5, None, 0);
    assert!(r.pass, "{r:?}");
    let bad = vec![2.0, -4.0, 1.1];
    let r = finite_diff_grad(f, &point, &spans, &bad, 1e-5, None, 0);
    assert!(!r.pass);
    assert!(r.tensor("a").unwrap().max_rel_error < 1e-8);
}

#[test]
fn stats_flag_overlaps() {
    let s = sampler_stats(10, 4, 2, || (vec![0, 1], vec![1, 2]));
    assert_eq!(s.overlap_violations, 10);
    assert_eq!(s.incomplete_coverage, 10);
}
