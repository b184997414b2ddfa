//! Forward and backward kernels shared by the transformer blocks and the
//! projection head. Activations are row-major `[rows, features]` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// `x W + b` with `W` stored `[in, out]`.
pub fn linear<T: Scalar>(x: ArrayView2<'_, T>, w: ArrayView2<'_, T>, b: Option<ArrayView1<'_, T>>) -> Array2<T> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Accumulates `dW += x^T dy`, `db += sum_rows(dy)` and returns `dx = dy W^T`.
pub fn linear_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
    dw: ArrayViewMut2<'_, T>,
    db: Option<ArrayViewMut1<'_, T>>,
) -> Array2<T> {
    let mut dw = dw;
    general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut dw);
    if let Some(mut db) = db {
        db += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w.t())
}

/// Saved state of a layer norm forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub fn layer_norm<T: Scalar>(
    x: ArrayView2<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> (Array2<T>, NormCache<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::<T>::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        row *= *r;
    }
    let y = &xhat * &gamma + &beta;
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: ArrayView1<'_, T>,
    dy: ArrayView2<'_, T>,
    mut dgamma: ArrayViewMut1<'_, T>,
    mut dbeta: ArrayViewMut1<'_, T>,
) -> Array2<T> {
    dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dy.sum_axis(Axis(0));
    let d = T::of(dy.ncols() as f64);
    let mut dx = &dy * &gamma;
    for ((mut g, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut g).and(&xh).for_each(|gv, &x| {
            *gv = r * (*gv - mean_g - x * mean_gx);
        });
    }
    dx
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
pub fn gelu<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let half = T::of(0.5);
    let inv = T::of(1.0 / SQRT_2);
    x.mapv(|v| half * v * (T::one() + (v * inv).erf()))
}

/// `dy * gelu'(x)` where `x` is the pre-activation.
pub fn gelu_backward<T: Scalar>(x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> Array2<T> {
    let half = T::of(0.5);
    let inv = T::of(1.0 / SQRT_2);
    let c = T::of(INV_SQRT_2PI);
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(&x).for_each(|g, &v| {
        let cdf = half * (T::one() + (v * inv).erf());
        let pdf = c * (-half * v * v).exp();
        *g = *g * (cdf + v * pdf);
    });
    out
}

/// Row-wise softmax, in place, with the row maximum subtracted first.
pub fn softmax_rows_inplace<T: Scalar>(mut x: ArrayViewMut2<'_, T>) {
    for mut row in x.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Batch normalization statistics of one forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Array2<T>,
    /// Per-feature `1 / sqrt(var + eps)` actually used.
    pub rstd: Array1<T>,
    pub batch_mean: Array1<T>,
    /// Biased batch variance.
    pub batch_var: Array1<T>,
    pub used_batch_stats: bool,
}

pub fn batch_norm<T: Scalar>(
    x: ArrayView2<'_, T>,
    gamma: Option<ArrayView1<'_, T>>,
    beta: Option<ArrayView1<'_, T>>,
    running: Option<(ArrayView1<'_, T>, ArrayView1<'_, T>)>,
) -> (Array2<T>, BatchNormCache<T>) {
    let eps = T::of(BATCH_NORM_EPS);
    let (mean, var, used_batch_stats) = match running {
        Some((m, v)) => (m.to_owned(), v.to_owned(), false),
        None => {
            let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &x - &mean;
            let var = (&centered * &centered).mean_axis(Axis(0)).expect("non-empty batch");
            (mean, var, true)
        }
    };
    let rstd = var.mapv(|v| T::one() / (v + eps).sqrt());
    let xhat = (&x - &mean) * &rstd;
    let mut y = xhat.clone();
    if let Some(g) = gamma {
        y *= &g;
    }
    if let Some(b) = beta {
        y += &b;
    }
    (
        y,
        BatchNormCache {
            xhat,
            rstd,
            batch_mean: mean,
            batch_var: var,
            used_batch_stats,
        },
    )
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: Option<ArrayView1<'_, T>>,
    dy: ArrayView2<'_, T>,
    dgamma: Option<ArrayViewMut1<'_, T>>,
    dbeta: Option<ArrayViewMut1<'_, T>>,
) -> Array2<T> {
    if let Some(mut dg) = dgamma {
        dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
    }
    if let Some(mut db) = dbeta {
        db += &dy.sum_axis(Axis(0));
    }
    let mut dxhat = dy.to_owned();
    if let Some(g) = gamma {
        dxhat *= &g;
    }
    if !cache.used_batch_stats {
        return dxhat * &cache.rstd;
    }
    let mean_g = dxhat.mean_axis(Axis(0)).expect("non-empty batch");
    let mean_gx = (&dxhat * &cache.xhat).mean_axis(Axis(0)).expect("non-empty batch");
    (dxhat - &mean_g - &cache.xhat * &mean_gx) * &cache.rstd
}
