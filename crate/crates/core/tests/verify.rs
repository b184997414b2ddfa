use ocl::encoder::{HeadKind, ViTConfig};
use ocl::masking::group_size;
use ocl::objective::tsp_similarity;
use ocl::verify::*;

#[test]
fn corrupted_kappa_fails_parity() {
    let (passed, _) = tsp_parity_with(1000, |c, k| Ok(0.5 * (1.0 + c) / (1.0 + (1.0 - c) * k * 1.001))).unwrap();
    assert!(!passed);
    let (passed, _) = tsp_parity_with(1000, |c, k| tsp_similarity(c, k)).unwrap();
    assert!(passed);
}

#[test]
fn default_setup_has_three_patch_groups() {
    let s = GradCheckSetup::default();
    assert_eq!(group_size((s.image_size / s.patch_size).pow(2), s.ratio).unwrap(), 3);
}

#[test]
fn gradients_match_finite_differences() {
    let g = gradient_check(&GradCheckSetup::default()).unwrap();
    assert!(g.report.pass, "{:#?}", g.report);
    assert!(g.projection_untouched);
}

#[test]
fn gradients_through_projection_head() {
    let setup = GradCheckSetup {
        vit: ViTConfig {
            blocks: 1,
            dim: 8,
            heads: 2,
            head: HeadKind::Mlp3,
            head_hidden: 12,
            head_out: 6,
            ..ViTConfig::tiny()
        },
        batch: 3,
        coords_per_tensor: None,
        ..GradCheckSetup::default()
    };
    let g = gradient_check(&setup).unwrap();
    assert!(g.report.pass, "{:#?}", g.report);
    assert!(g.report.tensor("head.2.linear.weight").is_some());
}
