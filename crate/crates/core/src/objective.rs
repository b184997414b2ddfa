//! The contrastive objective: L2 normalization, T-distributed spherical
//! (T-SP) similarity, temperature scaling and the symmetric cross-entropy
//! over the `B x B` similarity matrix, with its gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{OclError, Result};
use crate::scalar::Scalar;

/// Upper clamp on the temperature.
pub const TAU_MAX: f64 = 100.0;
pub const DEFAULT_KAPPA: f64 = 64.0;
pub const DEFAULT_TAU_INIT: f64 = 10.0;
const MIN_NORM: f64 = 1e-12;

/// `tau = min(exp(s), 100)`.
pub fn temperature<T: Scalar>(log_tau: T) -> T {
    log_tau.exp().min(T::of(TAU_MAX))
}

/// `d tau / d s`; zero once the clamp is active.
pub fn temperature_slope<T: Scalar>(log_tau: T) -> T {
    let tau = log_tau.exp();
    if tau < T::of(TAU_MAX) {
        tau
    } else {
        T::zero()
    }
}

pub fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(OclError::config(
            "objective.kappa",
            format!("concentration must be finite and >= 0, got {kappa}"),
        ));
    }
    Ok(())
}

/// `0.5 * (1 + c) / (1 + (1 - c) * kappa)`.
pub fn tsp_similarity<T: Scalar>(cosine: T, kappa: T) -> Result<T> {
    check_kappa(kappa.as_f64())?;
    Ok(tsp_unchecked(cosine, kappa))
}

#[inline]
fn tsp_unchecked<T: Scalar>(c: T, kappa: T) -> T {
    let one = T::one();
    T::of(0.5) * (one + c) / (one + (one - c) * kappa)
}

/// `d tsp / d c = 0.5 * (1 + 2 kappa) / (1 + (1 - c) kappa)^2`.
#[inline]
pub fn tsp_slope<T: Scalar>(c: T, kappa: T) -> T {
    let one = T::one();
    let den = one + (one - c) * kappa;
    T::of(0.5) * (one + kappa + kappa) / (den * den)
}

/// Rows scaled to unit Euclidean norm, plus the original norms.
pub fn l2_normalize<T: Scalar>(y: ArrayView2<'_, T>) -> Result<(Array2<T>, Array1<T>)> {
    let norms: Array1<T> = y
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    if let Some((i, n)) = norms
        .iter()
        .enumerate()
        .find(|(_, n)| !(n.as_f64() >= MIN_NORM))
    {
        return Err(OclError::Numeric {
            step: 0,
            location: "l2_normalize".into(),
            detail: format!("row {i} has norm {n}; degenerate embedding"),
        });
    }
    let out = &y / &norms.view().insert_axis(Axis(1));
    Ok((out, norms))
}

/// Gradient through `u = y / |y|`: `dy = (du - u (u . du)) / |y|`.
pub fn l2_normalize_backward<T: Scalar>(
    unit: ArrayView2<'_, T>,
    norms: &Array1<T>,
    d_unit: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut dy = d_unit.to_owned();
    for ((mut g, u), &n) in dy.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let dot = g.iter().zip(u).map(|(&a, &b)| a * b).sum::<T>();
        Zip::from(&mut g).and(&u).for_each(|gv, &uv| *gv = (*gv - uv * dot) / n);
    }
    dy
}

/// Scaled pairwise T-SP scores between two sets of unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    /// `tau * tsp(c_ij)`, the logits fed to the cross-entropy.
    pub scores: Array2<T>,
    /// Inner products before clamping.
    pub cosine: Array2<T>,
    /// Unscaled T-SP values in `[0, 1]`.
    pub raw: Array2<T>,
    pub kappa: T,
    pub tau: T,
}

/// `scores[i, j] = tau * tsp(m_i . n_j, kappa)`, with inner products clamped
/// to `[-1, 1]` first.
pub fn similarity_matrix<T: Scalar>(
    m: ArrayView2<'_, T>,
    n: ArrayView2<'_, T>,
    kappa: T,
    tau: T,
) -> Result<SimilarityMatrix<T>> {
    check_kappa(kappa.as_f64())?;
    if m.dim() != n.dim() {
        return Err(OclError::Shape {
            op: "similarity_matrix",
            detail: format!("{:?} vs {:?}", m.dim(), n.dim()),
        });
    }
    let cosine = m.dot(&n.t());
    let one = T::one();
    let raw = cosine.mapv(|c| tsp_unchecked(c.max(-one).min(one), kappa));
    let scores = &raw * tau;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(OclError::Numeric {
            step: 0,
            location: "similarity_matrix".into(),
            detail: "non-finite score".into(),
        });
    }
    Ok(SimilarityMatrix {
        scores,
        cosine,
        raw,
        kappa,
        tau,
    })
}

/// Mean cross-entropy of each row against target `i` (the diagonal), and the
/// gradient of that mean w.r.t. the logits.
pub fn diagonal_cross_entropy<T: Scalar>(logits: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
    let (rows, cols) = logits.dim();
    if rows != cols || rows < 2 {
        return Err(OclError::config(
            "train.batch_size",
            format!("cross-entropy needs a square matrix with B >= 2, got {rows}x{cols}"),
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(OclError::Numeric {
            step: 0,
            location: "cross-entropy".into(),
            detail: "non-finite score".into(),
        });
    }
    let b = T::of(rows as f64);
    let mut grad = logits.to_owned();
    let mut total = T::zero();
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let target = row[i];
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        total += sum.ln() + max - target;
        row.mapv_inplace(|e| e / sum / b);
        row[i] -= T::one() / b;
    }
    Ok((total / b, grad))
}

/// `(CE(sim_mn) + CE(sim_nm)) / 2` with targets on the diagonal.
pub fn symmetric_loss<T: Scalar>(sim_mn: &SimilarityMatrix<T>, sim_nm: &SimilarityMatrix<T>) -> Result<T> {
    let (a, _) = diagonal_cross_entropy(sim_mn.scores.view())?;
    let (b, _) = diagonal_cross_entropy(sim_nm.scores.view())?;
    Ok((a + b) * T::of(0.5))
}

/// Loss value and gradients of one contrastive step.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Gradient w.r.t. the upper-branch embeddings (before normalization).
    pub d_upper: Array2<T>,
    pub d_lower: Array2<T>,
    /// Gradient w.r.t. the log-temperature `s`.
    pub d_log_tau: T,
    pub tau: T,
    pub sim_mn: SimilarityMatrix<T>,
}

/// The full objective on raw `[CLS]` outputs of both branches.
pub fn contrastive_loss<T: Scalar>(
    upper: ArrayView2<'_, T>,
    lower: ArrayView2<'_, T>,
    kappa: f64,
    log_tau: T,
) -> Result<LossOutput<T>> {
    check_kappa(kappa)?;
    let k = T::of(kappa);
    let tau = temperature(log_tau);
    let (m, m_norm) = l2_normalize(upper)?;
    let (n, n_norm) = l2_normalize(lower)?;
    let sim_mn = similarity_matrix(m.view(), n.view(), k, tau)?;
    let sim_nm = similarity_matrix(n.view(), m.view(), k, tau)?;
    let (ce_mn, g_mn) = diagonal_cross_entropy(sim_mn.scores.view())?;
    let (ce_nm, g_nm) = diagonal_cross_entropy(sim_nm.scores.view())?;
    let half = T::of(0.5);
    let loss = (ce_mn + ce_nm) * half;

    let mut d_tau = T::zero();
    let mut d_cos = |sim: &SimilarityMatrix<T>, g: &Array2<T>| -> Array2<T> {
        let mut out = Array2::<T>::zeros(g.raw_dim());
        Zip::from(&mut out)
            .and(g)
            .and(&sim.cosine)
            .and(&sim.raw)
            .for_each(|o, &gs, &c, &r| {
                let gs = gs * half;
                d_tau += gs * r;
                *o = if c.abs() <= T::one() {
                    gs * tau * tsp_slope(c, k)
                } else {
                    T::zero()
                };
            });
        out
    };
    let dc_mn = d_cos(&sim_mn, &g_mn);
    let dc_nm = d_cos(&sim_nm, &g_nm);
    // c_mn = m n^T, c_nm = n m^T
    let dm = dc_mn.dot(&n) + dc_nm.t().dot(&n);
    let dn = dc_mn.t().dot(&m) + dc_nm.dot(&m);
    Ok(LossOutput {
        loss,
        d_upper: l2_normalize_backward(m.view(), &m_norm, dm.view()),
        d_lower: l2_normalize_backward(n.view(), &n_norm, dn.view()),
        d_log_tau: d_tau * temperature_slope(log_tau),
        tau,
        sim_mn,
    })
}
