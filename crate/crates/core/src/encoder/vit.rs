use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use super::head::HeadCache;
use super::layers::{gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows_inplace, NormCache};
use super::{Block, EncoderParams};
use crate::error::{OclError, Result};
use crate::scalar::Scalar;

/// Selects batch statistics (`Train`) or running statistics (`Eval`) in the
/// projection head. The transformer itself behaves identically in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BlockCache<T> {
    norm1: NormCache<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    /// One `[S, S]` attention matrix per (sequence, head), sequence-major.
    att: Vec<Array2<T>>,
    ctx: Array2<T>,
    norm2: NormCache<T>,
    h2: Array2<T>,
    fc1_out: Array2<T>,
    act: Array2<T>,
}

/// Everything the backward pass needs from a forward pass.
pub struct EncoderCache<T> {
    batch: usize,
    seq: usize,
    blocks: Vec<BlockCache<T>>,
    final_norm: NormCache<T>,
    head: Option<HeadCache<T>>,
}

impl<T> EncoderCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }
}

fn check_finite<T: Scalar>(x: &Array2<T>, location: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OclError::Numeric {
            step: 0,
            location: location(),
            detail: "non-finite activation".into(),
        })
    }
}

fn attention_forward<T: Scalar>(
    qkv: &Array2<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::<T>::zeros((batch * seq, d));
    let mut att = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = Array2::<T>::zeros((seq, seq));
            general_mat_mul(scale, &q, &k.t(), T::zero(), &mut scores);
            softmax_rows_inplace(scores.view_mut());
            let mut out = ctx.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]);
            general_mat_mul(T::one(), &scores, &v, T::zero(), &mut out);
            att.push(scores);
        }
    }
    (ctx, att)
}

fn attention_backward<T: Scalar>(
    qkv: &Array2<T>,
    att: &[Array2<T>],
    dctx: &Array2<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Array2<T> {
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dqkv = Array2::<T>::zeros(qkv.raw_dim());
    let mut dp = Array2::<T>::zeros((seq, seq));
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let p = &att[b * heads + h];
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let g = dctx.slice(s![rows.clone(), h * dh..(h + 1) * dh]);

            general_mat_mul(T::one(), &g, &v.t(), T::zero(), &mut dp);
            {
                let mut dv = dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                general_mat_mul(T::one(), &p.t(), &g, T::zero(), &mut dv);
            }
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            for (mut dprow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                let dot = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut dprow).and(&prow).for_each(|x, &pv| *x = pv * (*x - dot));
            }
            {
                let mut dq = dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]);
                general_mat_mul(scale, &dp, &k, T::zero(), &mut dq);
            }
            {
                let mut dk = dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                general_mat_mul(scale, &dp.t(), &q, T::zero(), &mut dk);
            }
        }
    }
    dqkv
}

fn block_forward<T: Scalar>(
    blk: &Block<T>,
    x: &Array2<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Array2<T>, BlockCache<T>) {
    let (h1, norm1) = layer_norm(x.view(), blk.norm1.gamma.view(), blk.norm1.beta.view());
    let qkv = linear(h1.view(), blk.qkv.weight.view(), blk.qkv.bias.as_ref().map(|b| b.view()));
    let (ctx, att) = attention_forward(&qkv, batch, seq, heads);
    let mut x2 = linear(ctx.view(), blk.proj.weight.view(), blk.proj.bias.as_ref().map(|b| b.view()));
    x2 += x;
    let (h2, norm2) = layer_norm(x2.view(), blk.norm2.gamma.view(), blk.norm2.beta.view());
    let fc1_out = linear(h2.view(), blk.fc1.weight.view(), blk.fc1.bias.as_ref().map(|b| b.view()));
    let act = gelu(fc1_out.view());
    let mut x3 = linear(act.view(), blk.fc2.weight.view(), blk.fc2.bias.as_ref().map(|b| b.view()));
    x3 += &x2;
    (
        x3,
        BlockCache {
            norm1,
            h1,
            qkv,
            att,
            ctx,
            norm2,
            h2,
            fc1_out,
            act,
        },
    )
}

fn block_backward<T: Scalar>(
    blk: &Block<T>,
    cache: &BlockCache<T>,
    dx3: Array2<T>,
    grads: &mut Block<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Array2<T> {
    let mut dx2 = dx3;
    let dact = linear_backward(
        cache.act.view(),
        blk.fc2.weight.view(),
        dx2.view(),
        grads.fc2.weight.view_mut(),
        grads.fc2.bias.as_mut().map(|b| b.view_mut()),
    );
    let dfc1 = gelu_backward(cache.fc1_out.view(), dact.view());
    let dh2 = linear_backward(
        cache.h2.view(),
        blk.fc1.weight.view(),
        dfc1.view(),
        grads.fc1.weight.view_mut(),
        grads.fc1.bias.as_mut().map(|b| b.view_mut()),
    );
    dx2 += &layer_norm_backward(
        &cache.norm2,
        blk.norm2.gamma.view(),
        dh2.view(),
        grads.norm2.gamma.view_mut(),
        grads.norm2.beta.view_mut(),
    );
    let dctx = linear_backward(
        cache.ctx.view(),
        blk.proj.weight.view(),
        dx2.view(),
        grads.proj.weight.view_mut(),
        grads.proj.bias.as_mut().map(|b| b.view_mut()),
    );
    let dqkv = attention_backward(&cache.qkv, &cache.att, &dctx, batch, seq, heads);
    let dh1 = linear_backward(
        cache.h1.view(),
        blk.qkv.weight.view(),
        dqkv.view(),
        grads.qkv.weight.view_mut(),
        grads.qkv.bias.as_mut().map(|b| b.view_mut()),
    );
    let mut dx = dx2;
    dx += &layer_norm_backward(
        &cache.norm1,
        blk.norm1.gamma.view(),
        dh1.view(),
        grads.norm1.gamma.view_mut(),
        grads.norm1.beta.view_mut(),
    );
    dx
}

impl<T: Scalar> EncoderParams<T> {
    /// Encodes `[B, S, D]` tokens and returns the `[CLS]` output `[B, D_out]`,
    /// passed through the projection head when one is configured.
    pub fn forward_cls(&self, tokens: ArrayView3<'_, T>, mode: Mode) -> Result<(Array2<T>, EncoderCache<T>)> {
        self.forward_impl(tokens, mode, true)
    }

    /// Like [`Self::forward_cls`] but always stops at the final norm; this is
    /// the representation used for probing and fine-tuning.
    pub fn forward_features(&self, tokens: ArrayView3<'_, T>) -> Result<(Array2<T>, EncoderCache<T>)> {
        self.forward_impl(tokens, Mode::Eval, false)
    }

    fn forward_impl(&self, tokens: ArrayView3<'_, T>, mode: Mode, use_head: bool) -> Result<(Array2<T>, EncoderCache<T>)> {
        let (batch, seq, d) = tokens.dim();
        if d != self.config.dim || seq == 0 || batch == 0 {
            return Err(OclError::Shape {
                op: "forward_cls",
                detail: format!("tokens {:?} for encoder width {}", tokens.dim(), self.config.dim),
            });
        }
        let heads = self.config.heads;
        let mut x = tokens
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * seq, d))
            .expect("standard layout");
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (next, cache) = block_forward(blk, &x, batch, seq, heads);
            check_finite(&next, || format!("block {i}"))?;
            x = next;
            caches.push(cache);
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls = x.select(Axis(0), &cls_rows);
        let (mut y, final_norm) = layer_norm(cls.view(), self.norm.gamma.view(), self.norm.beta.view());
        check_finite(&y, || "final norm".into())?;
        let mut head_cache = None;
        if let (true, Some(head)) = (use_head, &self.head) {
            let (z, hc) = head.forward(y.view(), mode == Mode::Train);
            check_finite(&z, || "projection head".into())?;
            y = z;
            head_cache = Some(hc);
        }
        Ok((
            y,
            EncoderCache {
                batch,
                seq,
                blocks: caches,
                final_norm,
                head: head_cache,
            },
        ))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the forward output) into
    /// `grads` and returns the gradient w.r.t. the input tokens `[B, S, D]`.
    pub fn backward_cls(&self, cache: &EncoderCache<T>, d_out: ArrayView2<'_, T>, grads: &mut EncoderParams<T>) -> Array3<T> {
        let (batch, seq, d) = (cache.batch, cache.seq, self.config.dim);
        let heads = self.config.heads;
        let d_feat = match (&cache.head, &self.head) {
            (Some(hc), Some(head)) => head.backward(hc, d_out, grads.head.as_mut().expect("same geometry")),
            _ => d_out.to_owned(),
        };
        let d_cls = layer_norm_backward(
            &cache.final_norm,
            self.norm.gamma.view(),
            d_feat.view(),
            grads.norm.gamma.view_mut(),
            grads.norm.beta.view_mut(),
        );
        let mut dx = Array2::<T>::zeros((batch * seq, d));
        for b in 0..batch {
            dx.row_mut(b * seq).assign(&d_cls.row(b));
        }
        for (i, blk) in self.blocks.iter().enumerate().rev() {
            dx = block_backward(blk, &cache.blocks[i], dx, &mut grads.blocks[i], batch, seq, heads);
        }
        dx.into_shape_with_order((batch, seq, d)).expect("row count preserved")
    }

    /// Folds the batch statistics of a training forward pass into the head's
    /// running statistics. No-op without a head.
    pub fn update_running_stats(&mut self, cache: &EncoderCache<T>) {
        if let (Some(head), Some(hc)) = (&mut self.head, &cache.head) {
            head.update_running_stats(hc, cache.batch);
        }
    }
}

/// Convenience for tests and evaluation: the forward output only.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, tokens: ArrayView3<'_, T>, mode: Mode) -> Result<Array2<T>> {
    params.forward_cls(tokens, mode).map(|(y, _)| y)
}
