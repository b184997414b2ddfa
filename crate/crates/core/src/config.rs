//! Run configuration: every knob of a pre-training + evaluation run in one
//! JSON-serializable struct with explicit defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::CorpusSpec;
use crate::encoder::{HeadKind, ViTConfig};
use crate::error::{OclError, Result};
use crate::masking::group_size;
use crate::objective::{check_kappa, DEFAULT_KAPPA, DEFAULT_TAU_INIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head: HeadKind,
    pub head_hidden: usize,
    pub head_out: usize,
}

impl Default for ModelConfig {
    /// ViT-Tiny/4 on 32x32 RGB images.
    fn default() -> Self {
        Self::from_vit(&ViTConfig::tiny(), 32, 3, 4)
    }
}

impl ModelConfig {
    pub fn from_vit(vit: &ViTConfig, image_size: usize, channels: usize, patch_size: usize) -> Self {
        Self {
            image_size,
            channels,
            patch_size,
            blocks: vit.blocks,
            dim: vit.dim,
            heads: vit.heads,
            mlp_ratio: vit.mlp_ratio,
            head: vit.head,
            head_hidden: vit.head_hidden,
            head_out: vit.head_out,
        }
    }

    pub fn vit(&self) -> ViTConfig {
        ViTConfig {
            blocks: self.blocks,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            head: self.head,
            head_hidden: self.head_hidden,
            head_out: self.head_out,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(OclError::config(
                "model.patch_size",
                format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size),
            ));
        }
        if self.channels == 0 {
            return Err(OclError::config("model.channels", "must be positive"));
        }
        self.vit().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Overall masked ratio `r`: the fraction of patches dropped before the
    /// visible ones are split into two groups.
    pub ratio: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { ratio: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kappa: f64,
    pub tau_init: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            tau_init: DEFAULT_TAU_INIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Peak lr = `base_lr * batch_size / 256` when set, `base_lr` otherwise.
    pub lr_scaling: bool,
}

impl OptimConfig {
    /// The large-scale recipe: base lr 1.5e-4 scaled by batch/256, 800
    /// epochs with 40 of warmup.
    pub fn reference() -> Self {
        Self {
            base_lr: 1.5e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            eps: 1e-8,
            warmup_epochs: 40,
            total_epochs: 800,
            lr_scaling: true,
        }
    }

    pub fn peak_lr(&self, batch_size: usize) -> f64 {
        if self.lr_scaling {
            self.base_lr * batch_size as f64 / 256.0
        } else {
            self.base_lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(OclError::config("optim.base_lr", "must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(OclError::config("optim.betas", "each beta must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OclError::config("optim.weight_decay", "must be non-negative"));
        }
        if !(self.eps > 0.0) {
            return Err(OclError::config("optim.eps", "must be positive"));
        }
        if self.total_epochs == 0 {
            return Err(OclError::config("optim.total_epochs", "must be positive"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(OclError::config(
                "optim.warmup_epochs",
                format!("{} exceeds total_epochs {}", self.warmup_epochs, self.total_epochs),
            ));
        }
        Ok(())
    }
}

impl Default for OptimConfig {
    /// Desk-scale schedule: 50 epochs with 5 of warmup, and a peak lr
    /// raised for a few hundred steps on a 1,000-image corpus.
    fn default() -> Self {
        Self {
            base_lr: DESK_BASE_LR,
            warmup_epochs: 5,
            total_epochs: 50,
            ..Self::reference()
        }
    }
}

/// Base lr of the desk-scale default; with batch 64 and scaling on, the peak
/// is `DESK_BASE_LR / 4`.
pub const DESK_BASE_LR: f64 = 4e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
    pub drop_last: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            checkpoint_every: 0,
            drop_last: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    LinearProbe,
    FineTune,
}

impl ProbeMode {
    pub fn label(self) -> &'static str {
        match self {
            ProbeMode::LinearProbe => "linear_probe",
            ProbeMode::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
}

impl ProbeConfig {
    pub fn linear() -> Self {
        Self {
            mode: ProbeMode::LinearProbe,
            epochs: 100,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 64,
            warmup_epochs: 5,
        }
    }

    pub fn fine_tune() -> Self {
        Self {
            mode: ProbeMode::FineTune,
            epochs: 10,
            lr: 2e-4,
            weight_decay: 0.05,
            batch_size: 32,
            warmup_epochs: 1,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(OclError::config(format!("{field}.epochs"), "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OclError::config(format!("{field}.lr"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(OclError::config(format!("{field}.batch_size"), "must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(OclError::config(format!("{field}.warmup_epochs"), "exceeds epochs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of each class used to train the classifier; the rest is
    /// held out for top-1.
    pub train_fraction: f64,
    pub linear: ProbeConfig,
    pub finetune: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            linear: ProbeConfig::linear(),
            finetune: ProbeConfig::fine_tune(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: CorpusSpec,
    pub masking: MaskingConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Single-threaded, fixed-order execution. The CPU kernels in this crate
    /// are already sequential, so this only forbids `--parallel` sweeps from
    /// sharing a process-wide resource; it is recorded for provenance.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: CorpusSpec::default(),
            masking: MaskingConfig::default(),
            objective: ObjectiveConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            deterministic: true,
        }
    }
}

/// Derived seeds of one run, so that changing e.g. the mask stream does not
/// shift parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub projection: u64,
    pub params: u64,
    pub masking: u64,
    pub shuffle: u64,
    pub split: u64,
    pub probe: u64,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Overlays `patch` onto `base`, recursing into objects present in both.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

impl RunConfig {
    /// Parses a possibly partial config. Missing fields at any depth take the
    /// default of their position, so `{"eval": {"linear": {"epochs": 5}}}`
    /// keeps the other linear-probe settings.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: serde_json::Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(RunConfig::default())?;
        merge(&mut merged, patch);
        let cfg: RunConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OclError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| OclError::io(path, e))
    }

    /// SHA-256 of the compact JSON form. Field order is fixed by the struct
    /// definitions, so equal configs hash equally.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            projection: mix(self.seed, 1),
            params: mix(self.seed, 2),
            masking: mix(self.seed, 3),
            shuffle: mix(self.seed, 4),
            split: mix(self.seed, 5),
            probe: mix(self.seed, 6),
        }
    }

    /// Learning-rate peak after optional batch scaling.
    pub fn peak_lr(&self) -> f64 {
        self.optim.peak_lr(self.train.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(OclError::config(
                "data.image_size",
                format!("{} differs from model.image_size {}", self.data.image_size, self.model.image_size),
            ));
        }
        if self.data.channels != self.model.channels {
            return Err(OclError::config(
                "data.channels",
                format!("{} differs from model.channels {}", self.data.channels, self.model.channels),
            ));
        }
        group_size(self.model.num_patches(), self.masking.ratio)?;
        check_kappa(self.objective.kappa)?;
        if !(self.objective.tau_init > 0.0 && self.objective.tau_init.is_finite()) {
            return Err(OclError::config("objective.tau_init", "must be positive"));
        }
        self.optim.validate()?;
        if self.train.batch_size < 2 {
            return Err(OclError::config(
                "train.batch_size",
                format!("{} leaves no in-batch negatives; need at least 2", self.train.batch_size),
            ));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(OclError::config("eval.train_fraction", "must lie strictly between 0 and 1"));
        }
        self.eval.linear.validate("eval.linear")?;
        self.eval.finetune.validate("eval.finetune")?;
        Ok(())
    }
}
