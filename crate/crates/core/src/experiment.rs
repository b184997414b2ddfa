//! Whole runs: pre-training to disk, probing a checkpoint, and ablation
//! sweeps that emit results CSVs and tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::ImageBatch;
use crate::encoder::{head_param_count, EncoderParams, HeadKind};
use crate::error::{OclError, Result};
use crate::evaluation::{fine_tune, linear_probe, stratified_split, ProbeResult};
use crate::masking::branch_visible_ratio;
use crate::patching::PatchEmbed;
use crate::trainer::{Checkpoint, MetricsWriter, StepStats, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const RESULTS_FILE: &str = "results.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| OclError::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    pub steps: usize,
    pub wall_secs: f64,
}

/// Mean of the last `steps_per_epoch` losses.
pub fn last_epoch_mean(losses: &[f64], steps_per_epoch: usize) -> f64 {
    let tail = &losses[losses.len().saturating_sub(steps_per_epoch)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Trains `config` on `corpus` in memory. Returns the trainer and the
/// per-step statistics.
pub fn pretrain_in_memory(
    config: &RunConfig,
    corpus: &ImageBatch,
    mut on_step: impl FnMut(&StepStats),
) -> Result<(Trainer<f32>, Vec<StepStats>)> {
    let mut trainer = Trainer::<f32>::new(config, corpus.len())?;
    let mut stats = Vec::with_capacity(trainer.total_steps());
    trainer.run(corpus, None, |_, s| {
        on_step(s);
        stats.push(s.clone());
        Ok(())
    })?;
    Ok((trainer, stats))
}

/// Full pre-training run under `config.out_dir`: `config.json`,
/// `metrics.csv`, periodic `checkpoint-epoch####.ckpt` files and the final
/// `checkpoint.ckpt`. Resumes from `resume` when given.
pub fn pretrain(
    config: &RunConfig,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepStats),
) -> Result<PretrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let corpus = config.data.load()?;
    corpus.validate(config.model.patch_size)?;
    let out = &config.out_dir;
    ensure_dir(out)?;
    config.save(&out.join(CONFIG_FILE))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(config, corpus.len(), &Checkpoint::<f32>::load(path)?)?,
        None => {
            if metrics_path.exists() {
                std::fs::remove_file(&metrics_path).map_err(|e| OclError::io(&metrics_path, e))?;
            }
            Trainer::new(config, corpus.len())?
        }
    };
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let mut losses = Vec::new();
    let every = config.train.checkpoint_every;
    trainer.run(&corpus, None, |t, s| {
        metrics.write(s)?;
        losses.push(s.loss);
        on_step(s);
        let epoch_done = t.step() % t.steps_per_epoch() == 0;
        let epoch = t.step() / t.steps_per_epoch();
        if every > 0 && epoch_done && epoch % every == 0 && !t.is_finished() {
            t.checkpoint().save(&out.join(format!("checkpoint-epoch{epoch:04}.ckpt")))?;
        }
        Ok(())
    })?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(PretrainOutcome {
        final_loss: last_epoch_mean(&losses, trainer.steps_per_epoch()),
        steps: trainer.step(),
        losses,
        checkpoint,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Linear-probe and fine-tune results of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub linear: ProbeResult,
    pub finetune: Option<ProbeResult>,
}

/// Probes `params` on `corpus` with the split and protocols of `config`.
/// Fine-tuning starts from the linear probe's classifier.
pub fn evaluate(
    config: &RunConfig,
    embed: &PatchEmbed<f32>,
    params: &EncoderParams<f32>,
    corpus: &ImageBatch,
    with_finetune: bool,
) -> Result<EvalOutcome> {
    let labels = corpus
        .labels
        .as_deref()
        .ok_or_else(|| OclError::config("data.source", "probing needs a labelled corpus"))?;
    let seeds = config.seeds();
    let split = stratified_split(labels, config.eval.train_fraction, seeds.split)?;
    let (clf, linear) = linear_probe(embed, params, corpus, &split, &config.eval.linear, seeds.probe)?;
    let finetune = if with_finetune {
        let (_, r) = fine_tune(embed, params, corpus, &split, &config.eval.finetune, Some(&clf), seeds.probe)?;
        Some(r)
    } else {
        None
    };
    Ok(EvalOutcome { linear, finetune })
}

/// The encoder of `config` at initialization, for random-feature baselines.
pub fn random_init_model(config: &RunConfig) -> Result<(PatchEmbed<f32>, EncoderParams<f32>)> {
    let seeds = config.seeds();
    let m = &config.model;
    let embed = PatchEmbed::new(seeds.projection, m.image_size, m.channels, m.patch_size, m.dim)?;
    let params = EncoderParams::init(&m.vit(), seeds.params, config.objective.tau_init)?;
    Ok((embed, params))
}

/// The sweepable axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    MaskedRatio,
    Kappa,
    BatchSize,
    MlpHead,
}

impl FromStr for AblationAxis {
    type Err = OclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_ratio" => Ok(AblationAxis::MaskedRatio),
            "kappa" => Ok(AblationAxis::Kappa),
            "batch_size" => Ok(AblationAxis::BatchSize),
            "mlp_head" => Ok(AblationAxis::MlpHead),
            other => Err(OclError::config(
                "axis",
                format!("unknown axis {other:?}; expected masked_ratio, kappa, batch_size or mlp_head"),
            )),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::MaskedRatio => "masked_ratio",
            AblationAxis::Kappa => "kappa",
            AblationAxis::BatchSize => "batch_size",
            AblationAxis::MlpHead => "mlp_head",
        }
    }

    /// The values swept by default.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::MaskedRatio => &["0.4", "0.3", "0.2", "0.0"],
            AblationAxis::Kappa => &["4", "16", "32", "64", "128"],
            AblationAxis::BatchSize => &["16", "32", "64"],
            AblationAxis::MlpHead => &["none", "mlp2", "mlp3"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = |e: String| OclError::config(self.name(), e);
        match self {
            AblationAxis::MaskedRatio => cfg.masking.ratio = value.parse().map_err(|e| bad(format!("{value:?}: {e}")))?,
            AblationAxis::Kappa => cfg.objective.kappa = value.parse().map_err(|e| bad(format!("{value:?}: {e}")))?,
            AblationAxis::BatchSize => cfg.train.batch_size = value.parse().map_err(|e| bad(format!("{value:?}: {e}")))?,
            AblationAxis::MlpHead => cfg.model.head = value.parse()?,
        }
        cfg.out_dir = base.out_dir.join(format!("ablate-{}", self.name())).join(value);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One sweep run. Accuracies are percentages; a failed run keeps its error
/// and empty metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub visible_ratio: Option<f64>,
    pub batch_size: usize,
    pub head_params: usize,
    pub final_loss: Option<f64>,
    pub lin: Option<f64>,
    pub ft: Option<f64>,
    pub wall_hours: f64,
    pub error: Option<String>,
}

fn run_one(axis: AblationAxis, base: &RunConfig, value: &str, with_finetune: bool) -> AblationRow {
    let started = Instant::now();
    let mut row = AblationRow {
        axis: axis.name().to_string(),
        value: value.to_string(),
        visible_ratio: None,
        batch_size: base.train.batch_size,
        head_params: 0,
        final_loss: None,
        lin: None,
        ft: None,
        wall_hours: 0.0,
        error: None,
    };
    let result = (|| -> Result<()> {
        let cfg = axis.apply(base, value)?;
        row.batch_size = cfg.train.batch_size;
        row.head_params = head_param_count(&cfg.model.vit());
        row.visible_ratio = Some(branch_visible_ratio(cfg.model.num_patches(), cfg.masking.ratio)?);
        let outcome = pretrain(&cfg, None, |_| {})?;
        row.final_loss = Some(outcome.final_loss);
        row.wall_hours = outcome.wall_secs / 3600.0;
        let ckpt = Checkpoint::<f32>::load(&outcome.checkpoint)?;
        let (embed, params) = crate::trainer::restore_model(&ckpt)?;
        let corpus = cfg.data.load()?;
        let eval = evaluate(&cfg, &embed, &params, &corpus, with_finetune)?;
        row.lin = Some(100.0 * eval.linear.top1);
        row.ft = eval.finetune.map(|r| 100.0 * r.top1);
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
        row.wall_hours = started.elapsed().as_secs_f64() / 3600.0;
    }
    row
}

/// Runs one pre-train + probe per value. Failures are recorded in the row
/// and the sweep continues. With `parallel > 1` up to that many runs execute
/// at once; rows come back in `values` order either way.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[String],
    base: &RunConfig,
    parallel: usize,
    with_finetune: bool,
    mut on_row: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let mut rows: Vec<Option<AblationRow>> = vec![None; values.len()];
    let workers = parallel.max(1);
    for (chunk_idx, chunk) in values.chunks(workers).enumerate() {
        let done: Vec<AblationRow> = if workers == 1 {
            chunk.iter().map(|v| run_one(axis, base, v, with_finetune)).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|v| scope.spawn(move || run_one(axis, base, v, with_finetune)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
            })
        };
        for (i, row) in done.into_iter().enumerate() {
            on_row(&row);
            rows[chunk_idx * workers + i] = Some(row);
        }
    }
    rows.into_iter().map(|r| r.expect("every value ran")).collect()
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| OclError::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(OclError::from)).collect()
}

/// Accuracy cell: "failed" for a failed run, "-" for a skipped protocol.
fn pct(row: &AblationRow, v: Option<f64>) -> String {
    match (v, &row.error) {
        (Some(x), _) => format!("{x:.1}"),
        (None, Some(_)) => "failed".to_string(),
        (None, None) => "-".to_string(),
    }
}

fn hours(v: f64) -> String {
    format!("{v:.4}")
}

fn head_label(value: &str) -> String {
    value.parse::<HeadKind>().map_or_else(|_| value.to_string(), |h| h.label().to_string())
}

fn markdown(header: &[&str], body: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", header.iter().map(|_| "---|").collect::<String>());
    for row in body {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

/// Markdown table laid out like the corresponding published ablation.
/// Output depends only on `rows`.
pub fn format_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    match axis {
        AblationAxis::MaskedRatio => markdown(
            &["Overall Masked Ratio", "Forward Visible Ratio", "Eff. Bsz.", "LIN", "FT", "Pre-training Hours"],
            &rows
                .iter()
                .map(|r| {
                    vec![
                        r.value.clone(),
                        r.visible_ratio.map_or_else(|| "-".into(), |v| format!("{v:.2}")),
                        r.batch_size.to_string(),
                        pct(r, r.lin),
                        pct(r, r.ft),
                        hours(r.wall_hours),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        AblationAxis::BatchSize => markdown(
            &["Effective Batch Size", "LIN", "FT", "Pre-training Hours"],
            &rows
                .iter()
                .map(|r| vec![r.value.clone(), pct(r, r.lin), pct(r, r.ft), hours(r.wall_hours)])
                .collect::<Vec<_>>(),
        ),
        AblationAxis::MlpHead => markdown(
            &["MLP Head", "Head Params", "Pre-training Hours", "Eff. Bsz.", "LIN", "FT"],
            &rows
                .iter()
                .map(|r| {
                    vec![
                        head_label(&r.value),
                        r.head_params.to_string(),
                        hours(r.wall_hours),
                        r.batch_size.to_string(),
                        pct(r, r.lin),
                        pct(r, r.ft),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        AblationAxis::Kappa => {
            let mut header = vec!["kappa".to_string()];
            header.extend(rows.iter().map(|r| r.value.clone()));
            let line = |label: &str, f: &dyn Fn(&AblationRow) -> String| -> Vec<String> {
                std::iter::once(label.to_string()).chain(rows.iter().map(f)).collect()
            };
            let body = vec![
                line("LIN", &|r| pct(r, r.lin)),
                line("FT", &|r| pct(r, r.ft)),
                line("Pre-training Hours", &|r| hours(r.wall_hours)),
            ];
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            markdown(&header, &body)
        }
    }
}
