use ocl::error::OclError;
use ocl::encoder::*;

#[test]
fn names_are_unique_and_orders_agree() {
    let mut cfg = ViTConfig::tiny();
    cfg.head = HeadKind::Mlp3;
    let mut p = EncoderParams::<f32>::init(&cfg, 0, 10.0).unwrap();
    let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    let mut_names: Vec<String> = p.tensors_mut().into_iter().map(|t| t.name).collect();
    assert_eq!(names, mut_names);
}

#[test]
fn decay_exclusions() {
    let mut cfg = ViTConfig::tiny();
    cfg.head = HeadKind::Mlp2;
    let p = EncoderParams::<f32>::init(&cfg, 0, 10.0).unwrap();
    for t in p.tensors() {
        let expect = if t.name.contains("running_") {
            ParamRole::Buffer
        } else if t.name.ends_with(".weight") {
            ParamRole::Decay
        } else {
            ParamRole::NoDecay
        };
        assert_eq!(t.role, expect, "{}", t.name);
    }
}

#[test]
fn counted_and_allocated_sizes_agree() {
    for head in [HeadKind::None, HeadKind::Mlp2, HeadKind::Mlp3] {
        let mut cfg = ViTConfig::tiny();
        cfg.head = head;
        let p = EncoderParams::<f32>::zeros(&cfg).unwrap();
        assert_eq!(parameter_count(&cfg, 4, 3), p.trainable_count() + 48 * 128);
    }
}

#[test]
fn init_ranges() {
    let p = EncoderParams::<f64>::init(&ViTConfig::tiny(), 3, 10.0).unwrap();
    assert!(p.cls.iter().all(|v| v.abs() <= 0.04));
    assert!((p.temperature() - 10.0).abs() < 1e-12);
    assert!(p.blocks[0].qkv.bias.as_ref().unwrap().iter().all(|v| *v == 0.0));
    assert!(p.all_finite());
}

#[test]
fn head_geometry() {
    let mut cfg = ViTConfig::tiny();
    cfg.validate().unwrap();
    assert_eq!(cfg.out_dim(), 128);
    cfg.head = HeadKind::Mlp2;
    assert_eq!(cfg.out_dim(), 512);
    cfg.heads = 3;
    assert!(matches!(cfg.validate(), Err(OclError::Config { .. })));
}
