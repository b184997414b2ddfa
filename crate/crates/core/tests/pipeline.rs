use ocl::config::{ModelConfig, RunConfig};
use ocl::datagen::CorpusSpec;
use ocl::encoder::ViTConfig;
use ocl::experiment::{self, AblationAxis, CHECKPOINT_FILE, METRICS_FILE};
use ocl::trainer::{Checkpoint, Trainer};

fn small_config(out: &std::path::Path) -> RunConfig {
    let vit = ViTConfig { blocks: 2, dim: 64, heads: 4, ..ViTConfig::tiny() };
    let mut cfg = RunConfig {
        model: ModelConfig::from_vit(&vit, 32, 3, 4),
        data: CorpusSpec::synthetic(2, 64, 1),
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.train.batch_size = 16;
    cfg.optim.warmup_epochs = 2;
    cfg.optim.total_epochs = 25;
    cfg
}

#[test]
fn two_hundred_steps_beat_the_no_learning_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let corpus = cfg.data.load().unwrap();
    let (trainer, stats) = experiment::pretrain_in_memory(&cfg, &corpus, |_| {}).unwrap();
    assert_eq!(stats.len(), 200);
    let last = experiment::last_epoch_mean(&stats.iter().map(|s| s.loss).collect::<Vec<_>>(), trainer.steps_per_epoch());
    let baseline = (cfg.train.batch_size as f64).ln();
    assert!(last < baseline - 0.2, "final loss {last} vs ln B {baseline}");
    assert!(stats.iter().all(|s| s.loss.is_finite() && s.grad_norm.is_finite()));
}

#[test]
fn projection_is_unchanged_after_a_hundred_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let corpus = cfg.data.load().unwrap();
    let mut trainer = Trainer::<f32>::new(&cfg, corpus.len()).unwrap();
    let before = trainer.embed.projection_digest();
    let params_before = trainer.params.digest();
    trainer.run(&corpus, Some(100), |_, _| Ok(())).unwrap();
    assert_eq!(trainer.step(), 100);
    assert_eq!(trainer.embed.projection_digest(), before);
    assert_ne!(trainer.params.digest(), params_before);
}

#[test]
fn pretrain_on_disk_resumes_from_periodic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("full"));
    cfg.optim.total_epochs = 4;
    cfg.optim.warmup_epochs = 1;
    cfg.train.checkpoint_every = 2;
    let full = experiment::pretrain(&cfg, None, |_| {}).unwrap();
    let periodic = cfg.out_dir.join("checkpoint-epoch0002.ckpt");
    assert!(periodic.exists());
    assert!(cfg.out_dir.join("config.json").exists());
    let metrics = std::fs::read_to_string(cfg.out_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 1 + full.steps);

    let mut resumed_cfg = cfg.clone();
    resumed_cfg.out_dir = dir.path().join("resumed");
    let resumed = experiment::pretrain(&resumed_cfg, Some(&periodic), |_| {}).unwrap();
    assert_eq!(resumed.steps, full.steps);
    let half = full.losses.len() / 2;
    assert_eq!(resumed.losses, full.losses[half..]);

    let a = Checkpoint::<f32>::load(&cfg.out_dir.join(CHECKPOINT_FILE)).unwrap();
    let b = Checkpoint::<f32>::load(&resumed_cfg.out_dir.join(CHECKPOINT_FILE)).unwrap();
    // The stored configs differ only in out_dir.
    assert_eq!((a.meta.step, &a.meta.rng), (b.meta.step, &b.meta.rng));
    assert_eq!(a.arrays, b.arrays);
}

#[test]
fn masked_ratio_sweep_records_visible_ratio_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data = CorpusSpec::synthetic(2, 16, 1);
    cfg.optim.total_epochs = 1;
    cfg.optim.warmup_epochs = 0;
    cfg.eval.linear.epochs = 2;
    cfg.eval.linear.warmup_epochs = 0;
    let values: Vec<String> = ["0.4", "0.99"].iter().map(|s| s.to_string()).collect();
    let rows = experiment::run_ablation(AblationAxis::MaskedRatio, &values, &cfg, 2, false, |_| {});
    assert_eq!(rows.len(), 2);
    assert!(rows[0].error.is_none(), "{:?}", rows[0].error);
    // N = 64: n = floor(0.6 * 64 / 2) = 19.
    assert_eq!(rows[0].visible_ratio, Some(19.0 / 64.0));
    assert!(rows[0].lin.is_some() && rows[0].ft.is_none());
    assert!(rows[1].error.as_deref().unwrap().contains("masking.ratio"));
    let table = experiment::format_table(AblationAxis::MaskedRatio, &rows);
    assert!(table.contains("| 0.4 | 0.30 | 16 |"), "{table}");
    assert!(table.contains("| 0.99 | - | 16 | failed | failed |"), "{table}");
}

#[test]
fn raw_pixels_beat_chance_on_the_synthetic_corpus() {
    let cfg = RunConfig::default();
    let corpus = cfg.data.load().unwrap();
    let labels = corpus.labels.clone().unwrap();
    let split = ocl::evaluation::stratified_split(&labels, 0.8, 3).unwrap();
    let flat = corpus.pixels.to_shape((corpus.len(), 3 * 32 * 32)).unwrap().mapv(f64::from);
    let pick = |idx: &[usize]| flat.select(ndarray::Axis(0), idx);
    let ys = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let mut probe = cfg.eval.linear.clone();
    probe.epochs = 20;
    let (_, result) = ocl::evaluation::train_probe(
        pick(&split.train).view(),
        &ys(&split.train),
        pick(&split.eval).view(),
        &ys(&split.eval),
        10,
        &probe,
        0,
    )
    .unwrap();
    assert!(result.top1 > 0.2, "raw-pixel top-1 {}", result.top1);
}
