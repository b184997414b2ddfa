use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use super::layers::{batch_norm, batch_norm_backward, gelu, gelu_backward, linear, linear_backward, BatchNormCache, BATCH_NORM_MOMENTUM};
use super::{HeadKind, Linear, ViTConfig};
use crate::scalar::Scalar;

/// Batch norm over features. The output layer of the head has no affine
/// parameters, matching the MoCo v3 projector.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Option<Array1<T>>,
    pub beta: Option<Array1<T>>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

/// `Linear (no bias) -> BatchNorm -> GELU?`
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer<T> {
    pub linear: Linear<T>,
    pub bn: BatchNorm<T>,
    pub gelu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub layers: Vec<HeadLayer<T>>,
}

fn layer_dims(config: &ViTConfig) -> Vec<(usize, usize, bool)> {
    let (d, h, o) = (config.dim, config.head_hidden, config.head_out);
    match config.head {
        HeadKind::None => vec![],
        HeadKind::Mlp2 => vec![(d, h, true), (h, o, false)],
        HeadKind::Mlp3 => vec![(d, h, true), (h, h, true), (h, o, false)],
    }
}

/// Trainable scalars of the projection head configured in `config`.
pub fn head_param_count(config: &ViTConfig) -> usize {
    layer_dims(config)
        .into_iter()
        .map(|(i, o, hidden)| i * o + if hidden { 2 * o } else { 0 })
        .sum()
}

impl<T: Scalar> Head<T> {
    /// Builds the head for `config.head`; weights are Xavier-uniform when an
    /// rng is given and zero otherwise.
    pub(super) fn build<R: Rng>(config: &ViTConfig, mut rng: Option<&mut R>) -> Option<Self> {
        let dims = layer_dims(config);
        if dims.is_empty() {
            return None;
        }
        let layers = dims
            .into_iter()
            .map(|(fan_in, fan_out, hidden)| HeadLayer {
                linear: match rng.as_deref_mut() {
                    Some(r) => Linear::xavier(r, fan_in, fan_out, false),
                    None => Linear::zeros(fan_in, fan_out, false),
                },
                bn: BatchNorm {
                    gamma: hidden.then(|| Array1::ones(fan_out)),
                    beta: hidden.then(|| Array1::zeros(fan_out)),
                    running_mean: Array1::zeros(fan_out),
                    running_var: Array1::ones(fan_out),
                },
                gelu: hidden,
            })
            .collect();
        Some(Self { layers })
    }

    pub(super) fn forward(&self, x: ArrayView2<'_, T>, batch_stats: bool) -> (Array2<T>, HeadCache<T>) {
        let mut cache = HeadCache {
            inputs: Vec::with_capacity(self.layers.len()),
            normed: Vec::with_capacity(self.layers.len()),
            bn: Vec::with_capacity(self.layers.len()),
        };
        let mut z = x.to_owned();
        for layer in &self.layers {
            let u = linear(z.view(), layer.linear.weight.view(), None);
            let running = (!batch_stats).then(|| (layer.bn.running_mean.view(), layer.bn.running_var.view()));
            let (n, bn_cache) = batch_norm(
                u.view(),
                layer.bn.gamma.as_ref().map(|g| g.view()),
                layer.bn.beta.as_ref().map(|b| b.view()),
                running,
            );
            let out = if layer.gelu { gelu(n.view()) } else { n.clone() };
            cache.inputs.push(z);
            cache.normed.push(n);
            cache.bn.push(bn_cache);
            z = out;
        }
        (z, cache)
    }

    pub(super) fn backward(&self, cache: &HeadCache<T>, dy: ArrayView2<'_, T>, grads: &mut Head<T>) -> Array2<T> {
        let mut g = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.gelu {
                g = gelu_backward(cache.normed[i].view(), g.view());
            }
            let gl = &mut grads.layers[i];
            let du = batch_norm_backward(
                &cache.bn[i],
                layer.bn.gamma.as_ref().map(|x| x.view()),
                g.view(),
                gl.bn.gamma.as_mut().map(|x| x.view_mut()),
                gl.bn.beta.as_mut().map(|x| x.view_mut()),
            );
            g = linear_backward(
                cache.inputs[i].view(),
                layer.linear.weight.view(),
                du.view(),
                gl.linear.weight.view_mut(),
                None,
            );
        }
        g
    }

    /// Exponential moving average of batch statistics (momentum 0.1, unbiased
    /// variance), as in the usual batch-norm training mode.
    pub(super) fn update_running_stats(&mut self, cache: &HeadCache<T>, batch: usize) {
        let m = T::of(BATCH_NORM_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if batch > 1 {
            T::of(batch as f64 / (batch - 1) as f64)
        } else {
            T::one()
        };
        for (layer, bn) in self.layers.iter_mut().zip(&cache.bn) {
            if !bn.used_batch_stats {
                continue;
            }
            layer.bn.running_mean = &layer.bn.running_mean * keep + &bn.batch_mean * m;
            layer.bn.running_var = &layer.bn.running_var * keep + &bn.batch_var * (m * unbias);
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    inputs: Vec<Array2<T>>,
    normed: Vec<Array2<T>>,
    bn: Vec<BatchNormCache<T>>,
}
