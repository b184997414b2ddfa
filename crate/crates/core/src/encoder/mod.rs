//! Pre-norm vision transformer that maps a token group to its `[CLS]`
//! embedding, with an optional MoCo-v3 style projection head.

mod head;
pub mod layers;
mod vit;

use ndarray::{Array1, Array2, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OclError, Result};
use crate::patching::xavier_uniform;
use crate::scalar::{digest, Scalar};

pub use head::{head_param_count, BatchNorm, Head, HeadLayer};
pub use vit::{encode, EncoderCache, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    None,
    Mlp2,
    Mlp3,
}

impl HeadKind {
    pub fn label(self) -> &'static str {
        match self {
            HeadKind::None => "w/o",
            HeadKind::Mlp2 => "2-layer",
            HeadKind::Mlp3 => "3-layer",
        }
    }

    pub fn depth(self) -> usize {
        match self {
            HeadKind::None => 0,
            HeadKind::Mlp2 => 2,
            HeadKind::Mlp3 => 3,
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = OclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "w/o" => Ok(HeadKind::None),
            "mlp2" | "2-layer" => Ok(HeadKind::Mlp2),
            "mlp3" | "3-layer" => Ok(HeadKind::Mlp3),
            other => Err(OclError::config("model.head", format!("unknown head `{other}`"))),
        }
    }
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_head_hidden() -> usize {
    1024
}

fn default_head_out() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub head: HeadKind,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_head_out")]
    pub head_out: usize,
}

impl ViTConfig {
    fn with(blocks: usize, dim: usize, heads: usize) -> Self {
        Self {
            blocks,
            dim,
            heads,
            mlp_ratio: default_mlp_ratio(),
            head: HeadKind::None,
            head_hidden: default_head_hidden(),
            head_out: default_head_out(),
        }
    }

    /// Desk-scale default: 4 blocks, width 128, 4 heads.
    pub fn tiny() -> Self {
        Self::with(4, 128, 4)
    }

    pub fn vit_base() -> Self {
        Self::with(12, 768, 12)
    }

    pub fn vit_large() -> Self {
        Self::with(24, 1024, 16)
    }

    pub fn vit_huge() -> Self {
        Self::with(32, 1280, 16)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::None => self.dim,
            _ => self.head_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(OclError::config("model.dim", format!("{} must be even and positive", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(OclError::config(
                "model.heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(OclError::config("model.mlp_ratio", "must be positive"));
        }
        if self.head != HeadKind::None && (self.head_hidden == 0 || self.head_out == 0) {
            return Err(OclError::config("model.head_hidden", "head widths must be positive"));
        }
        Ok(())
    }
}

/// `x W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: xavier_uniform(rng, fan_in, fan_out),
            bias: bias.then(|| Array1::zeros(fan_out)),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: bias.then(|| Array1::zeros(fan_out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    /// `[D, 3D]`, columns ordered `q | k | v`, each split by head.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// How the optimizer treats an array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    /// Trainable, with weight decay.
    Decay,
    /// Trainable, excluded from weight decay (norms, biases, `[CLS]`, temperature).
    NoDecay,
    /// Running statistics; never touched by the optimizer.
    Buffer,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        self != ParamRole::Buffer
    }
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// Every learnable array of the encoder plus the temperature. The frozen
/// patch projection lives in [`crate::patching::PatchEmbed`] instead.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: ViTConfig,
    /// `[2, D]`: one `[CLS]` token per branch (row 0 upper, row 1 lower).
    pub cls: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head: Option<Head<T>>,
    /// Log-temperature `s`, shape `[1]`; the temperature is `exp(s)`.
    pub log_tau: Array1<T>,
}

const CLS_INIT_STD: f64 = 0.02;

fn trunc_normal<T: Scalar>(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return T::of(v);
        }
    })
}

impl<T: Scalar> EncoderParams<T> {
    /// Xavier-uniform linear weights, zero biases, unit norms, `[CLS]` tokens
    /// from a normal truncated at two standard deviations.
    pub fn init(config: &ViTConfig, seed: u64, tau_init: f64) -> Result<Self> {
        config.validate()?;
        if !(tau_init > 0.0) {
            return Err(OclError::config("objective.tau_init", "temperature must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let cls = trunc_normal(&mut rng, (2, d), CLS_INIT_STD);
        let blocks = (0..config.blocks)
            .map(|_| Block {
                norm1: LayerNorm::new(d),
                qkv: Linear::xavier(&mut rng, d, 3 * d, true),
                proj: Linear::xavier(&mut rng, d, d, true),
                norm2: LayerNorm::new(d),
                fc1: Linear::xavier(&mut rng, d, hidden, true),
                fc2: Linear::xavier(&mut rng, hidden, d, true),
            })
            .collect();
        let head = Head::build(config, Some(&mut rng));
        Ok(Self {
            config: config.clone(),
            cls,
            blocks,
            norm: LayerNorm::new(d),
            head,
            log_tau: Array1::from_elem(1, T::of(tau_init.ln())),
        })
    }

    /// All-zero arrays with this geometry; used for gradient accumulators and
    /// for counting parameters of large configurations cheaply.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.blocks)
            .map(|_| Block {
                norm1: LayerNorm::new(d),
                qkv: Linear::zeros(d, 3 * d, true),
                proj: Linear::zeros(d, d, true),
                norm2: LayerNorm::new(d),
                fc1: Linear::zeros(d, hidden, true),
                fc2: Linear::zeros(hidden, d, true),
            })
            .collect();
        let mut params = Self {
            config: config.clone(),
            cls: Array2::zeros((2, d)),
            blocks,
            norm: LayerNorm::new(d),
            head: Head::build::<ChaCha8Rng>(config, None),
            log_tau: Array1::zeros(1),
        };
        for p in params.tensors_mut() {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config was validated on construction")
    }

    /// `tau = min(exp(s), 100)`.
    pub fn temperature(&self) -> T {
        crate::objective::temperature(self.log_tau[0])
    }

    pub fn tensors(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        fn push<'a, T: Scalar, D: Dimension>(
            out: &mut Vec<ParamRef<'a, T>>,
            name: String,
            role: ParamRole,
            a: &'a ndarray::Array<T, D>,
        ) {
            out.push(ParamRef {
                name,
                role,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("parameters are contiguous"),
            });
        }
        push(&mut out, "cls".into(), ParamRole::NoDecay, &self.cls);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            push(&mut out, format!("{p}.norm1.gamma"), ParamRole::NoDecay, &b.norm1.gamma);
            push(&mut out, format!("{p}.norm1.beta"), ParamRole::NoDecay, &b.norm1.beta);
            for (lname, lin) in [("qkv", &b.qkv), ("proj", &b.proj)] {
                push(&mut out, format!("{p}.{lname}.weight"), ParamRole::Decay, &lin.weight);
                if let Some(bias) = &lin.bias {
                    push(&mut out, format!("{p}.{lname}.bias"), ParamRole::NoDecay, bias);
                }
            }
            push(&mut out, format!("{p}.norm2.gamma"), ParamRole::NoDecay, &b.norm2.gamma);
            push(&mut out, format!("{p}.norm2.beta"), ParamRole::NoDecay, &b.norm2.beta);
            for (lname, lin) in [("fc1", &b.fc1), ("fc2", &b.fc2)] {
                push(&mut out, format!("{p}.{lname}.weight"), ParamRole::Decay, &lin.weight);
                if let Some(bias) = &lin.bias {
                    push(&mut out, format!("{p}.{lname}.bias"), ParamRole::NoDecay, bias);
                }
            }
        }
        push(&mut out, "norm.gamma".into(), ParamRole::NoDecay, &self.norm.gamma);
        push(&mut out, "norm.beta".into(), ParamRole::NoDecay, &self.norm.beta);
        if let Some(head) = &self.head {
            for (i, layer) in head.layers.iter().enumerate() {
                let p = format!("head.{i}");
                push(&mut out, format!("{p}.linear.weight"), ParamRole::Decay, &layer.linear.weight);
                if let Some(bias) = &layer.linear.bias {
                    push(&mut out, format!("{p}.linear.bias"), ParamRole::NoDecay, bias);
                }
                if let Some(g) = &layer.bn.gamma {
                    push(&mut out, format!("{p}.bn.gamma"), ParamRole::NoDecay, g);
                }
                if let Some(b) = &layer.bn.beta {
                    push(&mut out, format!("{p}.bn.beta"), ParamRole::NoDecay, b);
                }
                push(&mut out, format!("{p}.bn.running_mean"), ParamRole::Buffer, &layer.bn.running_mean);
                push(&mut out, format!("{p}.bn.running_var"), ParamRole::Buffer, &layer.bn.running_var);
            }
        }
        push(&mut out, "log_tau".into(), ParamRole::NoDecay, &self.log_tau);
        out
    }

    /// Same order and names as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        fn push<'a, T: Scalar, D: Dimension>(
            out: &mut Vec<ParamMut<'a, T>>,
            name: String,
            role: ParamRole,
            a: &'a mut ndarray::Array<T, D>,
        ) {
            out.push(ParamMut {
                name,
                role,
                shape: a.shape().to_vec(),
                data: a.as_slice_mut().expect("parameters are contiguous"),
            });
        }
        push(&mut out, "cls".into(), ParamRole::NoDecay, &mut self.cls);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            push(&mut out, format!("{p}.norm1.gamma"), ParamRole::NoDecay, &mut b.norm1.gamma);
            push(&mut out, format!("{p}.norm1.beta"), ParamRole::NoDecay, &mut b.norm1.beta);
            for (lname, lin) in [("qkv", &mut b.qkv), ("proj", &mut b.proj)] {
                push(&mut out, format!("{p}.{lname}.weight"), ParamRole::Decay, &mut lin.weight);
                if let Some(bias) = &mut lin.bias {
                    push(&mut out, format!("{p}.{lname}.bias"), ParamRole::NoDecay, bias);
                }
            }
            push(&mut out, format!("{p}.norm2.gamma"), ParamRole::NoDecay, &mut b.norm2.gamma);
            push(&mut out, format!("{p}.norm2.beta"), ParamRole::NoDecay, &mut b.norm2.beta);
            for (lname, lin) in [("fc1", &mut b.fc1), ("fc2", &mut b.fc2)] {
                push(&mut out, format!("{p}.{lname}.weight"), ParamRole::Decay, &mut lin.weight);
                if let Some(bias) = &mut lin.bias {
                    push(&mut out, format!("{p}.{lname}.bias"), ParamRole::NoDecay, bias);
                }
            }
        }
        push(&mut out, "norm.gamma".into(), ParamRole::NoDecay, &mut self.norm.gamma);
        push(&mut out, "norm.beta".into(), ParamRole::NoDecay, &mut self.norm.beta);
        if let Some(head) = &mut self.head {
            for (i, layer) in head.layers.iter_mut().enumerate() {
                let p = format!("head.{i}");
                push(&mut out, format!("{p}.linear.weight"), ParamRole::Decay, &mut layer.linear.weight);
                if let Some(bias) = &mut layer.linear.bias {
                    push(&mut out, format!("{p}.linear.bias"), ParamRole::NoDecay, bias);
                }
                if let Some(g) = &mut layer.bn.gamma {
                    push(&mut out, format!("{p}.bn.gamma"), ParamRole::NoDecay, g);
                }
                if let Some(b) = &mut layer.bn.beta {
                    push(&mut out, format!("{p}.bn.beta"), ParamRole::NoDecay, b);
                }
                push(&mut out, format!("{p}.bn.running_mean"), ParamRole::Buffer, &mut layer.bn.running_mean);
                push(&mut out, format!("{p}.bn.running_var"), ParamRole::Buffer, &mut layer.bn.running_var);
            }
        }
        push(&mut out, "log_tau".into(), ParamRole::NoDecay, &mut self.log_tau);
        out
    }

    /// Trainable scalar count (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.data.len())
            .sum()
    }

    /// Trainable scalars of the projection head alone.
    pub fn head_param_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|p| p.role.trainable() && p.name.starts_with("head."))
            .map(|p| p.data.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn digest(&self) -> String {
        digest(
            self.tensors()
                .iter()
                .flat_map(|p| p.data.iter().copied())
                .collect::<Vec<_>>(),
        )
    }

    /// Euclidean norm over all trainable entries.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|p| p.role.trainable())
            .flat_map(|p| p.data.iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Element-wise copy into another float type (e.g. `f32 -> f64`).
    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let mut out = EncoderParams::<U>::zeros(&self.config).expect("validated config");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = U::of(s.as_f64());
            }
        }
        out
    }
}

/// Trainable parameters plus the frozen patch projection of a geometry,
/// counted without allocating.
pub fn parameter_count(config: &ViTConfig, patch_size: usize, channels: usize) -> usize {
    let d = config.dim;
    let hidden = d * config.mlp_ratio;
    let per_block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    let head = head::head_param_count(config);
    2 * d + config.blocks * per_block + 2 * d + head + 1 + patch_size * patch_size * channels * d
}
