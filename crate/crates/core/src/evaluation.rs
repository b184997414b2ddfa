//! Linear probing and end-to-end fine-tuning on labelled images.
//!
//! Both read the encoder on the unmasked image: every patch in order behind
//! the upper-branch `[CLS]` token, stopping at the final norm (never the
//! projection head). The classifier sees features standardized with the
//! training split's mean and deviation.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{OptimConfig, ProbeConfig, ProbeMode};
use crate::datagen::{batch_iterator, ImageBatch};
use crate::encoder::{EncoderParams, ParamRole};
use crate::error::{OclError, Result};
use crate::masking::full_group;
use crate::patching::PatchEmbed;
use crate::scalar::Scalar;
use crate::trainer::{AdamW, Schedule};

/// Images encoded per forward pass during feature extraction.
const FEATURE_CHUNK: usize = 100;

/// Disjoint train/eval indices into a labelled corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Per-class shuffle, first `floor(fraction * count)` of each class to
/// train, the rest to eval.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<Split> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for k in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        members.shuffle(&mut rng);
        let cut = (train_fraction * members.len() as f64).floor() as usize;
        split.train.extend_from_slice(&members[..cut]);
        split.eval.extend_from_slice(&members[cut..]);
    }
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(OclError::config(
            "eval.train_fraction",
            format!(
                "{} train and {} eval images; both splits must be non-empty",
                split.train.len(),
                split.eval.len()
            ),
        ));
    }
    split.train.sort_unstable();
    split.eval.sort_unstable();
    Ok(split)
}

fn labels_of(images: &ImageBatch) -> Result<&[usize]> {
    images
        .labels
        .as_deref()
        .ok_or_else(|| OclError::config("data.source", "probing needs a labelled corpus"))
}

fn check_geometry<T: Scalar>(embed: &PatchEmbed<T>, params: &EncoderParams<T>) -> Result<()> {
    if embed.dim() != params.config.dim {
        return Err(OclError::config(
            "model.dim",
            format!("projection width {} differs from encoder width {}", embed.dim(), params.config.dim),
        ));
    }
    Ok(())
}

/// `[B, D]` features of the unmasked images.
pub fn extract_features<T: Scalar>(
    embed: &PatchEmbed<T>,
    params: &EncoderParams<T>,
    images: &ImageBatch,
) -> Result<Array2<T>> {
    check_geometry(embed, params)?;
    let mut out = Array2::zeros((images.len(), params.config.dim));
    for start in (0..images.len()).step_by(FEATURE_CHUNK) {
        let end = (start + FEATURE_CHUNK).min(images.len());
        let chunk = images.select(&(start..end).collect::<Vec<_>>());
        let x = embed.embed_images(&chunk)?;
        let tokens = full_group(x.view(), params.cls.row(0), embed.pos_table.view())?;
        let (features, _) = params.forward_features(tokens.view())?;
        out.slice_mut(s![start..end, ..]).assign(&features);
    }
    Ok(out)
}

/// `softmax(((x - mean) * inv_std) W + b)`, `W` stored `[D, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier<T> {
    pub mean: Array1<T>,
    pub inv_std: Array1<T>,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LinearClassifier<T> {
    /// Zero weights on top of the standardizer of `features`.
    pub fn fit_standardizer(features: ArrayView2<'_, T>, num_classes: usize) -> Self {
        let d = features.ncols();
        let mean = features.mean_axis(Axis(0)).expect("non-empty features");
        let var = features.var_axis(Axis(0), T::zero());
        let inv_std = var.mapv(|v| T::one() / (v + T::of(1e-6)).sqrt());
        Self {
            mean,
            inv_std,
            weight: Array2::zeros((d, num_classes)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn standardize(&self, features: ArrayView2<'_, T>) -> Array2<T> {
        (&features - &self.mean) * &self.inv_std
    }

    pub fn logits(&self, features: ArrayView2<'_, T>) -> Array2<T> {
        self.standardize(features).dot(&self.weight) + &self.bias
    }

    pub fn predict(&self, features: ArrayView2<'_, T>) -> Vec<usize> {
        argmax_rows(self.logits(features).view())
    }
}

fn argmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of correct predictions.
pub fn top1(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean cross-entropy against integer labels and its logit gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> (T, Array2<T>) {
    let b = T::of(logits.nrows() as f64);
    let mut grad = logits.to_owned();
    let mut loss = T::zero();
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let target = row[y] - max;
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss += sum.ln() - target;
        row.mapv_inplace(|v| v / sum / b);
        row[y] -= T::one() / b;
    }
    (loss / b, grad)
}

/// Backward through [`LinearClassifier::logits`] given the standardized
/// input `z`: returns `(d_features, d_weight, d_bias)`.
fn classifier_backward<T: Scalar>(
    clf: &LinearClassifier<T>,
    z: ArrayView2<'_, T>,
    d_logits: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let dw = z.t().dot(&d_logits);
    let db = d_logits.sum_axis(Axis(0));
    (d_logits.dot(&clf.weight.t()) * &clf.inv_std, dw, db)
}

fn optim_config(cfg: &ProbeConfig) -> OptimConfig {
    OptimConfig {
        base_lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        lr_scaling: false,
        ..OptimConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub top1: f64,
    pub train_top1: f64,
}

/// Softmax regression on fixed features with AdamW and a warmup-cosine
/// schedule. Returns the trained classifier and eval top-1.
pub fn train_probe(
    train_x: ArrayView2<'_, f64>,
    train_y: &[usize],
    eval_x: ArrayView2<'_, f64>,
    eval_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(LinearClassifier<f64>, ProbeResult)> {
    if train_y.is_empty() || eval_y.is_empty() {
        return Err(OclError::config("eval.train_fraction", "empty train or eval split"));
    }
    if num_classes < 2 {
        return Err(OclError::config("data.num_classes", "probing needs at least 2 classes"));
    }
    let mut clf = LinearClassifier::fit_standardizer(train_x, num_classes);
    let z_all = clf.standardize(train_x);
    let bs = cfg.batch_size.min(train_y.len());
    let steps_per_epoch = train_y.len().div_ceil(bs);
    let optim = optim_config(cfg);
    let schedule = Schedule::new(&optim, bs, steps_per_epoch);
    let mut adam = AdamW::<f64>::with_sizes([clf.weight.len(), clf.bias.len()], &optim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(bs) {
            let z = z_all.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let logits = z.dot(&clf.weight) + &clf.bias;
            let (_, d_logits) = softmax_cross_entropy(logits.view(), &y);
            let dw = z.t().dot(&d_logits);
            let db = d_logits.sum_axis(Axis(0));
            let slots = [
                (ParamRole::Decay, clf.weight.as_slice_mut().expect("contiguous"), dw.as_slice().expect("contiguous")),
                (ParamRole::NoDecay, clf.bias.as_slice_mut().expect("contiguous"), db.as_slice().expect("contiguous")),
            ];
            adam.update(slots, schedule.lr_at(step));
            step += 1;
        }
    }
    let result = ProbeResult {
        mode: ProbeMode::LinearProbe,
        epochs: cfg.epochs,
        top1: top1(&clf.predict(eval_x), eval_y),
        train_top1: top1(&clf.predict(train_x), train_y),
    };
    Ok((clf, result))
}

fn to_f64<T: Scalar>(a: &Array2<T>) -> Array2<f64> {
    a.mapv(|v| v.as_f64())
}

/// Frozen-encoder linear probe on a stratified split of `corpus`.
pub fn linear_probe<T: Scalar>(
    embed: &PatchEmbed<T>,
    params: &EncoderParams<T>,
    corpus: &ImageBatch,
    split: &Split,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(LinearClassifier<f64>, ProbeResult)> {
    let labels = labels_of(corpus)?;
    let features = to_f64(&extract_features(embed, params, corpus)?);
    let train_x = features.select(Axis(0), &split.train);
    let eval_x = features.select(Axis(0), &split.eval);
    let train_y: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let eval_y: Vec<usize> = split.eval.iter().map(|&i| labels[i]).collect();
    train_probe(train_x.view(), &train_y, eval_x.view(), &eval_y, corpus.num_classes(), cfg, seed)
}

/// Trains the encoder (everything but the frozen projection) together with
/// a linear classifier. When `init` is given the classifier starts from it
/// (e.g. the linear probe's solution), otherwise from zero weights on the
/// initial features' standardizer. `params` is left untouched; the tuned
/// copy is returned.
pub fn fine_tune(
    embed: &PatchEmbed<f32>,
    params: &EncoderParams<f32>,
    corpus: &ImageBatch,
    split: &Split,
    cfg: &ProbeConfig,
    init: Option<&LinearClassifier<f64>>,
    seed: u64,
) -> Result<(EncoderParams<f32>, ProbeResult)> {
    let labels = labels_of(corpus)?;
    let num_classes = corpus.num_classes();
    if num_classes < 2 {
        return Err(OclError::config("data.num_classes", "fine-tuning needs at least 2 classes"));
    }
    let train_set = corpus.select(&split.train);
    let eval_set = corpus.select(&split.eval);
    let train_y: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let eval_y: Vec<usize> = split.eval.iter().map(|&i| labels[i]).collect();
    if train_y.len() < 2 || eval_y.is_empty() {
        return Err(OclError::config("eval.train_fraction", "empty train or eval split"));
    }

    let mut clf: LinearClassifier<f32> = match init {
        Some(c) => LinearClassifier {
            mean: c.mean.mapv(|v| v as f32),
            inv_std: c.inv_std.mapv(|v| v as f32),
            weight: c.weight.mapv(|v| v as f32),
            bias: c.bias.mapv(|v| v as f32),
        },
        None => {
            let f = extract_features(embed, params, &train_set)?;
            LinearClassifier::fit_standardizer(f.view(), num_classes)
        }
    };
    let mut tuned = params.clone();
    let bs = cfg.batch_size.min(train_y.len());
    let steps_per_epoch = train_y.len() / bs;
    let optim = optim_config(cfg);
    let schedule = Schedule::new(&optim, bs, steps_per_epoch);
    let sizes: Vec<usize> = tuned
        .tensors()
        .iter()
        .map(|t| if t.role.trainable() { t.data.len() } else { 0 })
        .chain([clf.weight.len(), clf.bias.len()])
        .collect();
    let mut adam = AdamW::<f32>::with_sizes(sizes, &optim);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in batch_iterator(&train_set, bs, seed, epoch as u64, true)? {
            let y = batch.labels.clone().expect("labelled split");
            let x = embed.embed_images(&batch)?;
            let tokens = full_group(x.view(), tuned.cls.row(0), embed.pos_table.view())?;
            let (features, cache) = tuned.forward_features(tokens.view())?;
            let z = clf.standardize(features.view());
            let logits = z.dot(&clf.weight) + &clf.bias;
            let (loss, d_logits) = softmax_cross_entropy(logits.view(), &y);
            if !loss.is_finite() {
                return Err(OclError::Numeric {
                    step,
                    location: "fine-tune loss".into(),
                    detail: format!("loss {loss}"),
                });
            }
            let (d_features, dw, db) = classifier_backward(&clf, z.view(), d_logits.view());
            let mut grads = tuned.zeros_like();
            let d_tokens = tuned.backward_cls(&cache, d_features.view(), &mut grads);
            grads.cls.row_mut(0).assign(&d_tokens.slice(s![.., 0, ..]).sum_axis(Axis(0)));
            let g_tensors = grads.tensors();
            let lr = schedule.lr_at(step);
            let slots = tuned
                .tensors_mut()
                .into_iter()
                .zip(&g_tensors)
                .map(|(p, g)| (p.role, p.data, g.data))
                .chain([
                    (ParamRole::Decay, clf.weight.as_slice_mut().expect("contiguous"), dw.as_slice().expect("contiguous")),
                    (ParamRole::NoDecay, clf.bias.as_slice_mut().expect("contiguous"), db.as_slice().expect("contiguous")),
                ]);
            adam.update(slots, lr);
            step += 1;
        }
    }
    let eval_features = extract_features(embed, &tuned, &eval_set)?;
    let train_features = extract_features(embed, &tuned, &train_set)?;
    let result = ProbeResult {
        mode: ProbeMode::FineTune,
        epochs: cfg.epochs,
        top1: top1(&clf.predict(eval_features.view()), &eval_y),
        train_top1: top1(&clf.predict(train_features.view()), &train_y),
    };
    Ok((tuned, result))
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub mode: String,
    pub epochs: usize,
    /// Percent, one decimal.
    pub top1: String,
}

impl ResultRow {
    pub fn new(run_id: &str, result: &ProbeResult) -> Self {
        Self {
            run_id: run_id.to_string(),
            mode: result.mode.label().to_string(),
            epochs: result.epochs,
            top1: format!("{:.1}", 100.0 * result.top1),
        }
    }
}

/// Appends rows to a results CSV, writing the header for a new file.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let exists = std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| OclError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| OclError::io(path, e))
}
