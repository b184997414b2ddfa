//! Pre-training loop: one OCL step is embed, mask, gather both groups, a
//! joint encoder pass over the `2B` sequences, the symmetric T-SP loss,
//! backward, and an AdamW update of everything except the patch projection.

pub mod checkpoint;
pub mod optim;

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, s, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, NamedArray, RngState};
pub use optim::{AdamW, Schedule};

use crate::config::RunConfig;
use crate::datagen::{batch_iterator, batches_per_epoch, ImageBatch};
use crate::encoder::{EncoderCache, EncoderParams, Mode};
use crate::error::{OclError, Result};
use crate::masking::{gather_group, sample_mask_plan, Branch, MaskPlan};
use crate::objective::contrastive_loss;
use crate::patching::PatchEmbed;
use crate::scalar::Scalar;

/// Loss and parameter gradients of one OCL step on a fixed mask plan.
pub struct OclStep<T> {
    pub loss: T,
    pub tau: T,
    pub grads: EncoderParams<T>,
    pub cache: EncoderCache<T>,
}

/// Stacks the upper and lower groups into one `[2B, n + 1, D]` input.
fn ocl_tokens<T: Scalar>(
    params: &EncoderParams<T>,
    x: ArrayView3<'_, T>,
    pos_table: ArrayView2<'_, T>,
    plan: &MaskPlan,
) -> Result<Array3<T>> {
    let upper = gather_group(x, plan, Branch::Upper, params.cls.row(0), pos_table)?;
    let lower = gather_group(x, plan, Branch::Lower, params.cls.row(1), pos_table)?;
    Ok(concatenate(Axis(0), &[upper.tokens.view(), lower.tokens.view()]).expect("groups share a shape"))
}

/// OCL loss only (training-mode head statistics), for finite differences.
pub fn ocl_loss<T: Scalar>(
    params: &EncoderParams<T>,
    x: ArrayView3<'_, T>,
    pos_table: ArrayView2<'_, T>,
    plan: &MaskPlan,
    kappa: f64,
) -> Result<T> {
    let b = plan.batch_size();
    let tokens = ocl_tokens(params, x, pos_table, plan)?;
    let (y, _) = params.forward_cls(tokens.view(), Mode::Train)?;
    let out = contrastive_loss(y.slice(s![..b, ..]), y.slice(s![b.., ..]), kappa, params.log_tau[0])?;
    Ok(out.loss)
}

/// Forward and backward of the OCL loss. `x` is the embedded batch
/// `[B, N, D]`; no gradient flows into it.
pub fn ocl_forward_backward<T: Scalar>(
    params: &EncoderParams<T>,
    x: ArrayView3<'_, T>,
    pos_table: ArrayView2<'_, T>,
    plan: &MaskPlan,
    kappa: f64,
) -> Result<OclStep<T>> {
    let b = plan.batch_size();
    let tokens = ocl_tokens(params, x, pos_table, plan)?;
    let (y, cache) = params.forward_cls(tokens.view(), Mode::Train)?;
    let out = contrastive_loss(y.slice(s![..b, ..]), y.slice(s![b.., ..]), kappa, params.log_tau[0])?;
    let dy = concatenate(Axis(0), &[out.d_upper.view(), out.d_lower.view()]).expect("same width");
    let mut grads = params.zeros_like();
    let d_tokens = params.backward_cls(&cache, dy.view(), &mut grads);
    for (row, range) in [(0, 0..b), (1, b..2 * b)] {
        let d_cls = d_tokens.slice(s![range, 0, ..]).sum_axis(Axis(0));
        grads.cls.row_mut(row).assign(&d_cls);
    }
    grads.log_tau[0] = out.d_log_tau;
    Ok(OclStep {
        loss: out.loss,
        tau: out.tau,
        grads,
        cache,
    })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub tau: f64,
    pub wall_ms: f64,
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Appends to `path`, writing the header only when the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| OclError::io(path, e))?;
        let inner = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self { inner })
    }

    pub fn write(&mut self, stats: &StepStats) -> Result<()> {
        self.inner.serialize(stats)?;
        self.inner.flush().map_err(|e| OclError::io("metrics", e))
    }
}

fn at_step(err: OclError, step: usize) -> OclError {
    match err {
        OclError::Numeric { location, detail, .. } => OclError::Numeric { step, location, detail },
        other => other,
    }
}

/// Owns every mutable piece of a pre-training run.
pub struct Trainer<T> {
    config: RunConfig,
    pub embed: PatchEmbed<T>,
    pub params: EncoderParams<T>,
    pub optim: AdamW<T>,
    schedule: Schedule,
    steps_per_epoch: usize,
    step: usize,
    mask_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &RunConfig, corpus_len: usize) -> Result<Self> {
        config.validate()?;
        let bs = config.train.batch_size;
        let steps_per_epoch = batches_per_epoch(corpus_len, bs, config.train.drop_last);
        if steps_per_epoch == 0 {
            return Err(OclError::config(
                "train.batch_size",
                format!("{bs} exceeds the corpus size {corpus_len}"),
            ));
        }
        if !config.train.drop_last && corpus_len % bs == 1 {
            return Err(OclError::config(
                "train.drop_last",
                "the last batch would hold a single image and have no negatives",
            ));
        }
        let seeds = config.seeds();
        let m = &config.model;
        let embed = PatchEmbed::new(seeds.projection, m.image_size, m.channels, m.patch_size, m.dim)?;
        let params = EncoderParams::init(&m.vit(), seeds.params, config.objective.tau_init)?;
        let optim = AdamW::new(&params, &config.optim);
        Ok(Self {
            config: config.clone(),
            embed,
            params,
            optim,
            schedule: Schedule::new(&config.optim, bs, steps_per_epoch),
            steps_per_epoch,
            step: 0,
            mask_rng: ChaCha8Rng::seed_from_u64(seeds.masking),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn train_step(&mut self, batch: &ImageBatch) -> Result<StepStats> {
        let started = Instant::now();
        let step = self.step;
        let lr = self.schedule.lr_at(step);
        let x = self.embed.embed_images(batch)?;
        let plan = sample_mask_plan(&mut self.mask_rng, batch.len(), self.embed.num_patches, self.config.masking.ratio)?;
        let out = ocl_forward_backward(&self.params, x.view(), self.embed.pos_table.view(), &plan, self.config.objective.kappa)
            .map_err(|e| at_step(e, step))?;
        let grad_norm = out.grads.l2_norm();
        let loss = out.loss.as_f64();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(OclError::Numeric {
                step,
                location: "loss".into(),
                detail: format!("loss {loss}, lr {lr:.4e}, grad norm {grad_norm}"),
            });
        }
        self.params.update_running_stats(&out.cache);
        self.optim.step(&mut self.params, &out.grads, lr);
        self.step += 1;
        Ok(StepStats {
            step,
            epoch: step / self.steps_per_epoch,
            lr,
            loss,
            grad_norm,
            tau: out.tau.as_f64(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until `until` steps (the schedule's end when `None`), calling
    /// `on_step` after every step. Resumes mid-epoch: the batch order of an
    /// epoch depends only on the shuffle seed and the epoch number.
    pub fn run(
        &mut self,
        corpus: &ImageBatch,
        until: Option<usize>,
        mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>,
    ) -> Result<()> {
        let limit = until.unwrap_or(self.total_steps()).min(self.total_steps());
        let shuffle = self.config.seeds().shuffle;
        let (bs, drop_last) = (self.config.train.batch_size, self.config.train.drop_last);
        while self.step < limit {
            let epoch = self.step / self.steps_per_epoch;
            let skip = self.step % self.steps_per_epoch;
            let batches = batch_iterator(corpus, bs, shuffle, epoch as u64, drop_last)?.skip(skip);
            for batch in batches {
                if self.step >= limit {
                    break;
                }
                let stats = self.train_step(&batch)?;
                on_step(self, &stats)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut arrays = vec![NamedArray {
            name: "projection".into(),
            shape: self.embed.projection.shape().to_vec(),
            data: self.embed.projection.iter().copied().collect(),
        }];
        let tensors = self.params.tensors();
        for t in &tensors {
            arrays.push(NamedArray {
                name: format!("params.{}", t.name),
                shape: t.shape.clone(),
                data: t.data.to_vec(),
            });
        }
        for (i, t) in tensors.iter().enumerate() {
            if !t.role.trainable() {
                continue;
            }
            for (kind, moments) in [("m", &self.optim.m[i]), ("v", &self.optim.v[i])] {
                arrays.push(NamedArray {
                    name: format!("adam.{kind}.{}", t.name),
                    shape: t.shape.clone(),
                    data: moments.clone(),
                });
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: self.config.hash(),
                step: self.step as u64,
                rng: RngState::capture(&self.mask_rng),
                config: self.config.clone(),
            },
            arrays,
        }
    }

    /// Rebuilds a trainer from `config` and overwrites its state with the
    /// checkpoint. The model geometry must match.
    pub fn from_checkpoint(config: &RunConfig, corpus_len: usize, ckpt: &Checkpoint<T>) -> Result<Self> {
        if ckpt.meta.config.model != config.model {
            return Err(OclError::config("model", "geometry differs from the checkpoint"));
        }
        let mut trainer = Self::new(config, corpus_len)?;
        let (embed, params) = restore_model_into(ckpt, trainer.embed, trainer.params)?;
        trainer.embed = embed;
        trainer.params = params;
        for (i, t) in trainer.params.tensors().iter().enumerate() {
            if !t.role.trainable() {
                continue;
            }
            for kind in ["m", "v"] {
                let src = lookup(ckpt, &format!("adam.{kind}.{}", t.name), &t.shape)?;
                let dst = if kind == "m" { &mut trainer.optim.m[i] } else { &mut trainer.optim.v[i] };
                dst.copy_from_slice(&src.data);
            }
        }
        trainer.step = ckpt.meta.step as usize;
        trainer.optim.t = ckpt.meta.step;
        trainer.mask_rng = ckpt.meta.rng.restore()?;
        Ok(trainer)
    }
}

fn lookup<'a, T: Scalar>(ckpt: &'a Checkpoint<T>, name: &str, shape: &[usize]) -> Result<&'a NamedArray<T>> {
    let a = ckpt
        .get(name)
        .ok_or_else(|| OclError::format("checkpoint", format!("missing array {name}")))?;
    if a.shape != shape {
        return Err(OclError::config(
            "model",
            format!("array {name} has shape {:?}, model expects {:?}", a.shape, shape),
        ));
    }
    Ok(a)
}

fn restore_model_into<T: Scalar>(
    ckpt: &Checkpoint<T>,
    mut embed: PatchEmbed<T>,
    mut params: EncoderParams<T>,
) -> Result<(PatchEmbed<T>, EncoderParams<T>)> {
    let proj = lookup(ckpt, "projection", embed.projection.shape())?;
    embed
        .projection
        .as_slice_mut()
        .expect("contiguous")
        .copy_from_slice(&proj.data);
    for t in params.tensors_mut() {
        let src = lookup(ckpt, &format!("params.{}", t.name), &t.shape)?;
        t.data.copy_from_slice(&src.data);
    }
    Ok((embed, params))
}

/// The frozen projection and encoder stored in a checkpoint, rebuilt from
/// the checkpoint's own config.
pub fn restore_model<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<(PatchEmbed<T>, EncoderParams<T>)> {
    let m = &ckpt.meta.config.model;
    m.validate()?;
    let embed = PatchEmbed::new(0, m.image_size, m.channels, m.patch_size, m.dim)?;
    let params = EncoderParams::zeros(&m.vit())?;
    restore_model_into(ckpt, embed, params)
}
