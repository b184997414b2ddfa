use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ocl::config::ProbeMode;
use ocl::datagen::write_cifar_binary;
use ocl::evaluation::{append_results, fine_tune, linear_probe, stratified_split, ResultRow};
use ocl::experiment::{self, AblationAxis, RESULTS_FILE};
use ocl::trainer::{restore_model, Checkpoint};
use ocl::RunConfig;

/// Occluded contrastive pre-training of small vision transformers.
#[derive(Debug, Parser)]
#[command(name = "ocl", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Forces deterministic mode on.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, env = "OCL_OUT_DIR")]
    out: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train an encoder; writes checkpoints and metrics.csv.
    Pretrain {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen features of a checkpoint.
    Probe(ProbeArgs),
    /// Fine-tune a checkpoint end to end.
    Finetune(ProbeArgs),
    /// Sweep one axis: pre-train and probe once per value.
    Ablate {
        /// masked_ratio, kappa, batch_size or mlp_head.
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values; defaults to the standard sweep of the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Runs to execute concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Skip fine-tuning; the FT column reads "-".
        #[arg(long)]
        no_finetune: bool,
    },
    /// Render the table of an existing ablation rows CSV.
    Table {
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        rows: PathBuf,
    },
    /// Run the numerical verification suite; exits nonzero on any failure.
    Verify,
    /// Write the configured corpus in CIFAR binary layout.
    ExportCorpus {
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Defaults to <out>/checkpoint.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if global.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_step(s: &ocl::trainer::StepStats, steps_per_epoch: usize) {
    if (s.step + 1) % steps_per_epoch == 0 {
        eprintln!(
            "epoch {:>4}  step {:>6}  loss {:.4}  lr {:.3e}  tau {:.3}  grad_norm {:.3}",
            s.epoch, s.step, s.loss, s.lr, s.tau, s.grad_norm
        );
    }
}

fn pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let corpus_len = cfg.data.num_classes * cfg.data.images_per_class;
    let spe = ocl::datagen::batches_per_epoch(corpus_len, cfg.train.batch_size, cfg.train.drop_last).max(1);
    let outcome = experiment::pretrain(cfg, resume, |s| print_step(s, spe))?;
    println!(
        "final loss {:.4} after {} steps in {:.1}s; checkpoint {}",
        outcome.final_loss,
        outcome.steps,
        outcome.wall_secs,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn probe(cfg: &RunConfig, args: &ProbeArgs, mode: ProbeMode) -> Result<()> {
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(experiment::CHECKPOINT_FILE));
    let ckpt = Checkpoint::<f32>::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let (embed, params) = restore_model(&ckpt)?;
    let corpus = cfg.data.load()?;
    let labels = corpus
        .labels
        .as_deref()
        .context("the corpus has no labels to probe against")?;
    let seeds = cfg.seeds();
    let split = stratified_split(labels, cfg.eval.train_fraction, seeds.split)?;
    let result = match mode {
        ProbeMode::LinearProbe => linear_probe(&embed, &params, &corpus, &split, &cfg.eval.linear, seeds.probe)?.1,
        ProbeMode::FineTune => {
            let (clf, _) = linear_probe(&embed, &params, &corpus, &split, &cfg.eval.linear, seeds.probe)?;
            fine_tune(&embed, &params, &corpus, &split, &cfg.eval.finetune, Some(&clf), seeds.probe)?.1
        }
    };
    let run_id = format!("{}@{}", ckpt.meta.config_hash.get(..12).unwrap_or(""), ckpt.meta.step);
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let results = cfg.out_dir.join(RESULTS_FILE);
    append_results(&results, &[ResultRow::new(&run_id, &result)])?;
    println!(
        "{} top-1 {:.1}% (train {:.1}%), appended to {}",
        mode.label(),
        100.0 * result.top1,
        100.0 * result.train_top1,
        results.display()
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, axis: AblationAxis, values: &[String], parallel: usize, no_finetune: bool) -> Result<()> {
    let values = if values.is_empty() { axis.default_values() } else { values.to_vec() };
    let rows = experiment::run_ablation(axis, &values, cfg, parallel, !no_finetune, |row| match &row.error {
        Some(e) => eprintln!("{} = {}: failed: {e}", row.axis, row.value),
        None => eprintln!(
            "{} = {}: loss {:.4}  lin {:.1}",
            row.axis,
            row.value,
            row.final_loss.unwrap_or(f64::NAN),
            row.lin.unwrap_or(f64::NAN)
        ),
    });
    let dir = cfg.out_dir.join(format!("ablate-{}", axis.name()));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows_path = dir.join("rows.csv");
    experiment::write_rows(&rows_path, &rows)?;
    let table = experiment::format_table(axis, &rows);
    std::fs::write(dir.join("table.md"), &table).with_context(|| format!("writing table in {}", dir.display()))?;
    print!("{table}");
    eprintln!("rows written to {}", rows_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = resolve_config(&cli.global)?;
    if cli.global.dry_run {
        println!("{}", cfg.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    match cli.command {
        Command::Pretrain { resume } => pretrain(&cfg, resume.as_deref())?,
        Command::Probe(args) => probe(&cfg, &args, ProbeMode::LinearProbe)?,
        Command::Finetune(args) => probe(&cfg, &args, ProbeMode::FineTune)?,
        Command::Ablate {
            axis,
            values,
            parallel,
            no_finetune,
        } => ablate(&cfg, axis, &values, parallel, no_finetune)?,
        Command::Table { axis, rows } => {
            let rows = experiment::read_rows(&rows)?;
            print!("{}", experiment::format_table(axis, &rows));
        }
        Command::Verify => {
            let report = ocl::verify::run_all();
            print!("{report}");
            if !report.passed() {
                let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
                eprintln!("verification failed: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportCorpus { output } => {
            let corpus = cfg.data.load()?;
            write_cifar_binary(&corpus, &output)?;
            println!("wrote {} images to {}", corpus.len(), output.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
