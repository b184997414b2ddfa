//! Reference computations used to check the production paths.
//!
//! Nothing here calls into `objective`, `encoder` or `masking` arithmetic:
//! every formula is re-derived with plain loops over `f64` slices so that an
//! error in a shared helper cannot hide in both sides of a comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Scalar T-SP similarity, written out directly.
pub fn tsp_scalar(cosine: f64, kappa: f64) -> f64 {
    let numerator = 1.0 + cosine;
    let denominator = 1.0 + (1.0 - cosine) * kappa;
    0.5 * numerator / denominator
}

fn unit(v: &[f64]) -> Vec<f64> {
    let mut sq = 0.0;
    for x in v {
        sq += x * x;
    }
    let norm = sq.sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
    }
    dot.clamp(-1.0, 1.0)
}

/// Per-pair loss of one direction: `-log(exp(s_ii) / sum_k exp(s_ik))` over
/// the `B` candidates of the opposite group, averaged over anchors.
fn one_direction(anchors: &[Vec<f64>], candidates: &[Vec<f64>], kappa: f64, tau: f64) -> f64 {
    let b = anchors.len();
    let mut total = 0.0;
    for i in 0..b {
        let positive = (tsp_scalar(cosine(&anchors[i], &candidates[i]), kappa) * tau).exp();
        let mut denominator = positive;
        for (k, cand) in candidates.iter().enumerate() {
            if k != i {
                denominator += (tsp_scalar(cosine(&anchors[i], cand), kappa) * tau).exp();
            }
        }
        total += -(positive / denominator).ln();
    }
    total / b as f64
}

/// Symmetric contrastive loss by explicit double loops over all pairs.
///
/// Inputs are raw (unnormalized) `[CLS]` embeddings, one `Vec` per image.
pub fn bruteforce_loss(upper: &[Vec<f64>], lower: &[Vec<f64>], kappa: f64, tau: f64) -> f64 {
    let u: Vec<Vec<f64>> = upper.iter().map(|v| unit(v)).collect();
    let l: Vec<Vec<f64>> = lower.iter().map(|v| unit(v)).collect();
    0.5 * (one_direction(&u, &l, kappa, tau) + one_direction(&l, &u, kappa, tau))
}

/// Location of one parameter tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub h: f64,
    pub dtype: &'static str,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`]. Some coordinates have an exactly
/// zero gradient (attention key biases, by softmax shift invariance), where
/// central differences return pure round-off of about `1e-10`; below the
/// floor the check is effectively absolute at `1e-4 * floor`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central differences `(f(p + h) - f(p - h)) / 2h` on a seeded subset of at
/// least `coords_per_tensor` coordinates of every tensor (all coordinates
/// when the tensor is smaller or `coords_per_tensor` is `None`).
pub fn finite_diff_grad(
    mut loss: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    spans: &[TensorSpan],
    analytic: &[f64],
    h: f64,
    coords_per_tensor: Option<usize>,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(point.len(), analytic.len(), "gradient and point sizes differ");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = point.to_vec();
    let mut tensors = Vec::with_capacity(spans.len());
    for span in spans {
        let coords: Vec<usize> = match coords_per_tensor {
            Some(k) if k < span.len => sample(&mut rng, span.len, k).into_vec(),
            _ => (0..span.len).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let idx = span.offset + c;
            let orig = work[idx];
            work[idx] = orig + h;
            let plus = loss(&work);
            work[idx] = orig - h;
            let minus = loss(&work);
            work[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel = max_rel.max(relative_error(analytic[idx], numeric));
            max_abs = max_abs.max((analytic[idx] - numeric).abs());
        }
        tensors.push(TensorCheck {
            name: span.name.clone(),
            coordinates: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let pass = tensors.iter().all(|t| t.max_rel_error < GRAD_CHECK_TOLERANCE);
    GradCheckReport {
        tensors,
        h,
        dtype: "f64",
        tolerance: GRAD_CHECK_TOLERANCE,
        pass,
    }
}

/// Inclusion statistics of a two-group patch sampler.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerStats {
    pub trials: usize,
    pub num_patches: usize,
    pub group_size: usize,
    /// Empirical frequency with which each index lands in the upper group.
    pub frequency: Vec<f64>,
    pub expected: f64,
    /// Binomial standard deviation of one frequency.
    pub sigma: f64,
    pub max_abs_z: f64,
    pub chi_square: f64,
    pub overlap_violations: usize,
    pub size_violations: usize,
    /// Trials in which the two groups together did not cover every patch.
    pub incomplete_coverage: usize,
}

impl SamplerStats {
    pub fn within_sigma(&self, k: f64) -> bool {
        self.max_abs_z <= k
    }
}

/// Runs `sampler` `trials` times and tabulates inclusion in the upper group.
/// `sampler` returns the (upper, lower) index lists of one image.
pub fn sampler_stats(
    trials: usize,
    num_patches: usize,
    group_size: usize,
    mut sampler: impl FnMut() -> (Vec<usize>, Vec<usize>),
) -> SamplerStats {
    let mut counts = vec![0usize; num_patches];
    let mut overlap_violations = 0;
    let mut size_violations = 0;
    let mut incomplete_coverage = 0;
    for _ in 0..trials {
        let (upper, lower) = sampler();
        if upper.len() != group_size || lower.len() != group_size {
            size_violations += 1;
        }
        let mut in_upper = vec![false; num_patches];
        let mut in_any = vec![false; num_patches];
        let mut overlap = false;
        for &p in &upper {
            if in_upper[p] {
                overlap = true;
            }
            in_upper[p] = true;
            in_any[p] = true;
            counts[p] += 1;
        }
        let mut in_lower = vec![false; num_patches];
        for &p in &lower {
            if in_upper[p] || in_lower[p] {
                overlap = true;
            }
            in_lower[p] = true;
            in_any[p] = true;
        }
        if overlap {
            overlap_violations += 1;
        }
        if in_any.iter().any(|v| !v) {
            incomplete_coverage += 1;
        }
    }
    let t = trials as f64;
    let p = group_size as f64 / num_patches as f64;
    let sigma = (p * (1.0 - p) / t).sqrt();
    let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / t).collect();
    let max_abs_z = frequency
        .iter()
        .map(|f| if sigma > 0.0 { (f - p).abs() / sigma } else { 0.0 })
        .fold(0.0, f64::max);
    let expected_count = p * t;
    let chi_square = counts
        .iter()
        .map(|&c| (c as f64 - expected_count).powi(2) / expected_count)
        .sum();
    SamplerStats {
        trials,
        num_patches,
        group_size,
        frequency,
        expected: p,
        sigma,
        max_abs_z,
        chi_square,
        overlap_violations,
        size_violations,
        incomplete_coverage,
    }
}
