use ocl::encoder::{HeadKind, ViTConfig};
use ocl::encoder::*;

fn cfg(kind: HeadKind, dim: usize) -> ViTConfig {
    let mut c = ViTConfig::tiny();
    c.dim = dim;
    c.head = kind;
    c
}

#[test]
fn mlp2_shapes() {
    let h = EncoderParams::<f32>::init(&cfg(HeadKind::Mlp2, 768), 0, 10.0).unwrap().head.unwrap();
    let shapes: Vec<_> = h.layers.iter().map(|l| l.linear.weight.dim()).collect();
    assert_eq!(shapes, vec![(768, 1024), (1024, 512)]);
    assert!(h.layers[0].gelu && !h.layers[1].gelu);
    assert!(h.layers[1].bn.gamma.is_none());
}

#[test]
fn mlp3_shapes() {
    let h = EncoderParams::<f32>::init(&cfg(HeadKind::Mlp3, 128), 0, 10.0).unwrap().head.unwrap();
    let shapes: Vec<_> = h.layers.iter().map(|l| l.linear.weight.dim()).collect();
    assert_eq!(shapes, vec![(128, 1024), (1024, 1024), (1024, 512)]);
    assert_eq!(
        head_param_count(&cfg(HeadKind::Mlp3, 128)),
        128 * 1024 + 2048 + 1024 * 1024 + 2048 + 1024 * 512
    );
}

#[test]
fn no_head_is_pass_through() {
    assert!(EncoderParams::<f32>::init(&cfg(HeadKind::None, 128), 0, 10.0).unwrap().head.is_none());
    assert_eq!(head_param_count(&cfg(HeadKind::None, 128)), 0);
}
