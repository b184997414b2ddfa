//! Self-check suite run by `ocl verify`: production paths against the
//! independent references in [`crate::oracle`].

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{ModelConfig, RunConfig};
use crate::datagen::{generate_synthetic, CorpusSpec};
use crate::encoder::{EncoderParams, HeadKind, ViTConfig};
use crate::error::Result;
use crate::masking::{group_size, sample_mask_plan};
use crate::objective::{contrastive_loss, tsp_similarity};
use crate::oracle::{self, finite_diff_grad, sampler_stats, GradCheckReport, TensorSpan};
use crate::patching::PatchEmbed;
use crate::trainer::{ocl_forward_backward, ocl_loss, Checkpoint, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {:<22} {:>10.1} ms  {}", c.name, c.wall_ms, c.detail)?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn timed(name: &str, check: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let started = Instant::now();
    let (passed, detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Compares `similarity(c, kappa)` with the scalar reference on `pairs`
/// random points and checks the closed forms exactly.
pub fn tsp_parity_with(pairs: usize, similarity: impl Fn(f64, f64) -> Result<f64>) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x75b);
    let mut max_err: f64 = 0.0;
    for _ in 0..pairs {
        let c: f64 = rng.random_range(-1.0..=1.0);
        let kappa: f64 = rng.random_range(0.0..=256.0);
        max_err = max_err.max((similarity(c, kappa)? - oracle::tsp_scalar(c, kappa)).abs());
    }
    let mut closed = vec![
        ("c=1", similarity(1.0, 64.0)?, 1.0),
        ("c=-1", similarity(-1.0, 64.0)?, 0.0),
        ("c=0,k=64", similarity(0.0, 64.0)?, 0.5 / 65.0),
    ];
    for c in [-0.75, -0.1, 0.3, 0.9] {
        closed.push(("k=0", similarity(c, 0.0)?, (1.0 + c) / 2.0));
    }
    let broken: Vec<&str> = closed.iter().filter(|(_, got, want)| got != want).map(|(n, _, _)| *n).collect();
    let passed = max_err <= 1e-12 && broken.is_empty();
    let mut detail = format!("{pairs} pairs, max abs error {max_err:.2e}");
    if !broken.is_empty() {
        detail.push_str(&format!(", closed forms violated: {}", broken.join(" ")));
    }
    Ok((passed, detail))
}

fn gaussian_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((b, d), || rng.sample(StandardNormal))
}

fn as_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// `instances` random problems with `B` in 2..=8, `kappa` in {0, 4, 64} and
/// `tau` in {1, 10}; returns the largest absolute loss difference.
pub fn loss_equivalence(instances: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut max_err: f64 = 0.0;
    for i in 0..instances {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(3..=32);
        let kappa = [0.0, 4.0, 64.0][i % 3];
        let tau: f64 = [1.0, 10.0][(i / 3) % 2];
        let u = gaussian_rows(&mut rng, b, d);
        // Half the instances share structure between the groups so the
        // positives are strongly aligned.
        let l = if i % 2 == 0 {
            &u + &(gaussian_rows(&mut rng, b, d) * 0.1)
        } else {
            gaussian_rows(&mut rng, b, d)
        };
        let prod = contrastive_loss(u.view(), l.view(), kappa, tau.ln())?.loss;
        let reference = oracle::bruteforce_loss(&as_rows(&u), &as_rows(&l), kappa, tau);
        max_err = max_err.max((prod - reference).abs());
    }
    Ok((max_err <= 1e-10, format!("{instances} instances, max abs error {max_err:.2e}")))
}

/// Geometry of the finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSetup {
    pub vit: ViTConfig,
    pub image_size: usize,
    pub patch_size: usize,
    pub batch: usize,
    pub ratio: f64,
    pub kappa: f64,
    pub tau_init: f64,
    pub seed: u64,
    /// Coordinates per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub h: f64,
}

impl Default for GradCheckSetup {
    /// Two blocks of width 16 with two heads, batch 2, three patches per
    /// group (8x8 images in 2x2 patches, masked ratio 0.6).
    fn default() -> Self {
        Self {
            vit: ViTConfig {
                blocks: 2,
                dim: 16,
                heads: 2,
                ..ViTConfig::tiny()
            },
            image_size: 8,
            patch_size: 2,
            batch: 2,
            ratio: 0.6,
            kappa: 64.0,
            tau_init: 10.0,
            seed: 11,
            coords_per_tensor: Some(200),
            h: 1e-5,
        }
    }
}

/// Result of [`gradient_check`]: the finite-difference report plus the
/// frozen-projection contract.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub report: GradCheckReport,
    pub group_size: usize,
    /// The projection never receives a gradient: it is bit-identical after
    /// an optimizer step on the analytic gradient.
    pub projection_untouched: bool,
}

/// Analytic OCL gradients of every trainable tensor against central
/// differences in `f64`.
pub fn gradient_check(setup: &GradCheckSetup) -> Result<GradientCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let embed = PatchEmbed::<f64>::new(setup.seed, setup.image_size, 3, setup.patch_size, setup.vit.dim)?;
    let mut params = EncoderParams::<f64>::init(&setup.vit, setup.seed + 1, setup.tau_init)?;
    // Move norms, biases and BN affines off their identity init so their
    // gradients are generic.
    for t in params.tensors_mut() {
        if t.role == crate::encoder::ParamRole::NoDecay && t.name != "log_tau" {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let corpus = generate_synthetic(&CorpusSpec {
        image_size: setup.image_size,
        ..CorpusSpec::synthetic(2, setup.batch.div_ceil(2), setup.seed)
    })?;
    let batch = corpus.select(&(0..setup.batch).collect::<Vec<_>>());
    let x = embed.embed_images(&batch)?;
    let plan = sample_mask_plan(&mut rng, setup.batch, embed.num_patches, setup.ratio)?;

    let step = ocl_forward_backward(&params, x.view(), embed.pos_table.view(), &plan, setup.kappa)?;

    let mut spans = Vec::new();
    let mut point = Vec::new();
    let mut analytic = Vec::new();
    for (p, g) in params.tensors().iter().zip(step.grads.tensors()) {
        if !p.role.trainable() {
            continue;
        }
        spans.push(TensorSpan {
            name: p.name.clone(),
            offset: point.len(),
            len: p.data.len(),
        });
        point.extend_from_slice(p.data);
        analytic.extend_from_slice(g.data);
    }
    let mut work = params.clone();
    let loss = |flat: &[f64]| -> f64 {
        let mut offset = 0;
        for t in work.tensors_mut() {
            if t.role.trainable() {
                t.data.copy_from_slice(&flat[offset..offset + t.data.len()]);
                offset += t.data.len();
            }
        }
        ocl_loss(&work, x.view(), embed.pos_table.view(), &plan, setup.kappa).expect("finite loss")
    };
    let report = finite_diff_grad(loss, &point, &spans, &analytic, setup.h, setup.coords_per_tensor, setup.seed);

    let before = embed.projection_digest();
    let mut opt = crate::trainer::AdamW::new(&params, &crate::config::OptimConfig::default());
    opt.step(&mut params, &step.grads, 1e-2);
    Ok(GradientCheck {
        report,
        group_size: plan.group_size,
        projection_untouched: embed.projection_digest() == before,
    })
}

/// Sampler statistics for one `(N, r)` over `trials` single-image plans.
pub fn mask_statistics(num_patches: usize, ratio: f64, trials: usize, seed: u64) -> Result<oracle::SamplerStats> {
    let n = group_size(num_patches, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failure = None;
    let stats = sampler_stats(trials, num_patches, n, || match sample_mask_plan(&mut rng, 1, num_patches, ratio) {
        Ok(mut plan) => (plan.upper.remove(0), plan.lower.remove(0)),
        Err(e) => {
            failure.get_or_insert(e);
            (Vec::new(), Vec::new())
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

fn sampler_check() -> Result<(bool, String)> {
    let stats = mask_statistics(16, 0.5, 10_000, 0x5a3)?;
    let full = mask_statistics(16, 0.0, 1_000, 0x5a4)?;
    let passed = stats.within_sigma(3.0)
        && stats.overlap_violations == 0
        && stats.size_violations == 0
        && full.incomplete_coverage == 0
        && full.overlap_violations == 0;
    Ok((
        passed,
        format!(
            "N=16 r=0.5: max |z| {:.2}, chi2 {:.1}, overlaps {}; r=0 uncovered trials {}",
            stats.max_abs_z, stats.chi_square, stats.overlap_violations, full.incomplete_coverage
        ),
    ))
}

fn tiny_run_config() -> RunConfig {
    let vit = ViTConfig {
        blocks: 1,
        dim: 16,
        heads: 2,
        head: HeadKind::Mlp2,
        head_hidden: 16,
        head_out: 8,
        ..ViTConfig::tiny()
    };
    let mut cfg = RunConfig {
        model: ModelConfig::from_vit(&vit, 16, 3, 4),
        data: CorpusSpec {
            image_size: 16,
            ..CorpusSpec::synthetic(2, 8, 3)
        },
        ..RunConfig::default()
    };
    cfg.train.batch_size = 4;
    cfg.optim.total_epochs = 2;
    cfg.optim.warmup_epochs = 1;
    cfg
}

fn checkpoint_check() -> Result<(bool, String)> {
    let cfg = tiny_run_config();
    let corpus = generate_synthetic(&cfg.data)?;
    let mut trainer = Trainer::<f32>::new(&cfg, corpus.len())?;
    trainer.run(&corpus, Some(3), |_, _| Ok(()))?;
    let ckpt = trainer.checkpoint();
    let path = std::env::temp_dir().join(format!("ocl-verify-{}.ckpt", std::process::id()));
    ckpt.save(&path)?;
    let loaded = Checkpoint::<f32>::load(&path);
    let _ = std::fs::remove_file(&path);
    let loaded = loaded?;
    let bits = |c: &Checkpoint<f32>| -> Vec<Vec<u32>> {
        c.arrays.iter().map(|a| a.data.iter().map(|v| v.to_bits()).collect()).collect()
    };
    let same = loaded.meta == ckpt.meta && bits(&loaded) == bits(&ckpt);
    Ok((same, format!("{} arrays, step {}", ckpt.arrays.len(), ckpt.meta.step)))
}

/// Every check of the suite, in a fixed order.
pub fn run_all() -> VerifyReport {
    let checks = vec![
        timed("tsp_parity", || tsp_parity_with(10_000, |c, k| tsp_similarity(c, k))),
        timed("loss_equivalence", || loss_equivalence(100)),
        timed("gradient_check", || {
            let g = gradient_check(&GradCheckSetup::default())?;
            let worst = g
                .report
                .tensors
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .map(|t| t.name.clone())
                .unwrap_or_default();
            Ok((
                g.report.pass && g.projection_untouched,
                format!(
                    "{} tensors, max rel error {:.2e} ({worst}), projection untouched {}",
                    g.report.tensors.len(),
                    g.report.max_rel_error(),
                    g.projection_untouched
                ),
            ))
        }),
        timed("sampler_stats", sampler_check),
        timed("checkpoint_round_trip", checkpoint_check),
    ];
    VerifyReport { checks }
}
