use ndarray::{s, Array3};
use rand::Rng;
use ocl::error::OclError;
use ocl::masking::*;
use ocl::patching::sinusoidal_table;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ratio_pairs() {
    assert_eq!(group_size(196, 0.4).unwrap(), 58);
    assert_eq!(group_size(196, 0.3).unwrap(), 68);
    assert_eq!(group_size(196, 0.8).unwrap(), 19);
    assert_eq!(group_size(196, 0.2).unwrap(), 78);
    assert_eq!(group_size(4, 0.0).unwrap(), 2);
    assert_eq!(group_size(20, 0.3).unwrap(), 7);
    assert!((branch_visible_ratio(196, 0.4).unwrap() - 0.296).abs() < 1e-3);
    assert!((branch_visible_ratio(196, 0.3).unwrap() - 0.347).abs() < 1e-3);
}

#[test]
fn too_high_ratio_names_n() {
    let err = group_size(4, 0.9).unwrap_err();
    assert!(err.to_string().contains("n = 0"), "{err}");
    assert!(group_size(4, 1.0).is_err());
    assert!(group_size(4, -0.1).is_err());
}

#[test]
fn zero_ratio_covers_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = sample_mask_plan(&mut rng, 3, 4, 0.0).unwrap();
    for (u, l) in plan.upper.iter().zip(&plan.lower) {
        let mut all: Vec<usize> = u.iter().chain(l).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }
}

#[test]
fn plan_is_seeded() {
    let a = sample_mask_plan(&mut ChaCha8Rng::seed_from_u64(5), 4, 64, 0.3).unwrap();
    let b = sample_mask_plan(&mut ChaCha8Rng::seed_from_u64(5), 4, 64, 0.3).unwrap();
    assert_eq!(a, b);
    let json = a.to_json().unwrap();
    let back: MaskPlan = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
}

fn naive_gather(
    x: &Array3<f64>,
    idx: &[Vec<usize>],
    cls: &Array1<f64>,
    pos: &Array2<f64>,
) -> Array3<f64> {
    let (b, _, d) = x.dim();
    let n = idx[0].len();
    let mut out = Array3::zeros((b, n + 1, d));
    for i in 0..b {
        for k in 0..d {
            out[[i, 0, k]] = cls[k] + pos[[0, k]];
            for j in 0..n {
                out[[i, j + 1, k]] = x[[i, idx[i][j], k]] + pos[[idx[i][j] + 1, k]];
            }
        }
    }
    out
}

#[test]
fn gather_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Array3::<f64>::from_shape_simple_fn((3, 16, 8), || rng.random_range(-1.0..1.0));
    let cls = Array1::<f64>::from_shape_simple_fn(8, || rng.random_range(-1.0..1.0));
    let pos: Array2<f64> = sinusoidal_table(17, 8).unwrap();
    let plan = sample_mask_plan(&mut rng, 3, 16, 0.5).unwrap();
    for branch in [Branch::Upper, Branch::Lower] {
        let g = gather_group(x.view(), &plan, branch, cls.view(), pos.view()).unwrap();
        assert_eq!(g.tokens, naive_gather(&x, plan.indices(branch), &cls, &pos));
    }
    let swapped = plan.swapped();
    let u = gather_group(x.view(), &plan, Branch::Upper, cls.view(), pos.view()).unwrap();
    let l2 = gather_group(x.view(), &swapped, Branch::Lower, cls.view(), pos.view()).unwrap();
    assert_eq!(u.tokens, l2.tokens);
}

#[test]
fn zero_inputs_yield_position_rows() {
    let x = Array3::<f64>::zeros((1, 4, 6));
    let cls = Array1::<f64>::zeros(6);
    let pos: Array2<f64> = sinusoidal_table(5, 6).unwrap();
    let plan = sample_mask_plan(&mut ChaCha8Rng::seed_from_u64(1), 1, 4, 0.0).unwrap();
    let g = gather_group(x.view(), &plan, Branch::Upper, cls.view(), pos.view()).unwrap();
    assert_eq!(g.tokens.slice(s![0, 0, ..]), pos.row(0));
    for (j, &p) in plan.upper[0].iter().enumerate() {
        assert_eq!(g.tokens.slice(s![0, j + 1, ..]), pos.row(p + 1));
    }
}

#[test]
fn out_of_range_index_is_internal_error() {
    let x = Array3::<f64>::zeros((1, 4, 2));
    let pos: Array2<f64> = sinusoidal_table(5, 2).unwrap();
    let mut plan = sample_mask_plan(&mut ChaCha8Rng::seed_from_u64(1), 1, 4, 0.0).unwrap();
    plan.upper[0][0] = 7;
    let cls = Array1::<f64>::zeros(2);
    assert!(matches!(
        gather_group(x.view(), &plan, Branch::Upper, cls.view(), pos.view()),
        Err(OclError::Shape { .. })
    ));
}

proptest! {
    #[test]
    fn groups_are_disjoint_and_equal_sized(
        seed in any::<u64>(),
        n_patches in 4usize..200,
        ratio in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = sample_mask_plan(&mut rng, 3, n_patches, ratio).unwrap();
        let n = ((1.0 - ratio) * n_patches as f64 / 2.0 + 1e-9).floor() as usize;
        prop_assert_eq!(plan.group_size, n);
        for (u, l) in plan.upper.iter().zip(&plan.lower) {
            prop_assert_eq!(u.len(), n);
            prop_assert_eq!(l.len(), n);
            let mut seen = vec![false; n_patches];
            for &p in u.iter().chain(l) {
                prop_assert!(!seen[p]);
                seen[p] = true;
            }
        }
    }
}
