use ocl::config::OptimConfig;
use ocl::encoder::{EncoderParams, ParamRole};
use ocl::trainer::optim::*;
use ocl::encoder::ViTConfig;

fn schedule() -> Schedule {
    Schedule {
        peak: 1e-3,
        warmup_steps: 10,
        total_steps: 100,
    }
}

#[test]
fn lr_endpoints() {
    let s = schedule();
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(10) - 1e-3).abs() < 1e-18);
    assert!(s.lr_at(100).abs() < 1e-18);
    assert!((s.lr_at(5) - 5e-4).abs() < 1e-18);
    assert!((s.lr_at(55) - 5e-4).abs() < 1e-15);
}

#[test]
fn lr_continuous_at_junction() {
    let s = Schedule {
        peak: 1.0,
        warmup_steps: 1000,
        total_steps: 100_000,
    };
    assert!((s.lr_at(999) - s.lr_at(1000)).abs() < 1.5e-3);
    assert!((s.lr_at(1000) - s.lr_at(1001)).abs() < 1e-6);
}

#[test]
fn zero_lr_leaves_params() {
    let cfg = ViTConfig { blocks: 1, dim: 8, heads: 2, ..ViTConfig::tiny() };
    let mut p = EncoderParams::<f32>::init(&cfg, 0, 10.0).unwrap();
    let before = p.clone();
    let mut g = p.zeros_like();
    for t in g.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.5);
    }
    let mut opt = AdamW::new(&p, &OptimConfig::default());
    opt.step(&mut p, &g, 0.0);
    assert_eq!(p, before);
}

#[test]
fn decay_applies_to_weights_only() {
    let cfg = ViTConfig { blocks: 1, dim: 8, heads: 2, ..ViTConfig::tiny() };
    let mut p = EncoderParams::<f64>::init(&cfg, 0, 10.0).unwrap();
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = 1.0);
    }
    let g = p.zeros_like();
    let mut opt = AdamW::new(&p, &OptimConfig { weight_decay: 0.5, ..OptimConfig::default() });
    opt.step(&mut p, &g, 0.1);
    for t in p.tensors() {
        let expect = if t.role == ParamRole::Decay { 0.95 } else { 1.0 };
        assert!(t.data.iter().all(|&v| (v - expect).abs() < 1e-12), "{}", t.name);
    }
    let decayed: Vec<String> = p
        .tensors()
        .iter()
        .filter(|t| t.role == ParamRole::Decay)
        .map(|t| t.name.clone())
        .collect();
    assert!(decayed.iter().all(|n| n.ends_with(".weight")));
}

#[test]
fn first_step_moves_by_lr() {
    // With bias correction the first Adam step is lr * sign(g).
    let cfg = ViTConfig { blocks: 1, dim: 8, heads: 2, ..ViTConfig::tiny() };
    let mut p = EncoderParams::<f64>::zeros(&cfg).unwrap();
    let mut g = p.zeros_like();
    g.log_tau[0] = -3.0;
    let mut opt = AdamW::new(&p, &OptimConfig::default());
    opt.step(&mut p, &g, 0.01);
    assert!((p.log_tau[0] - 0.01).abs() < 1e-9);
}
