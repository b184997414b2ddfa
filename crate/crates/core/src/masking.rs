//! Random patch masking and the split of visible patches into two disjoint
//! contrastive groups, each prefixed with its own `[CLS]` token.

use ndarray::{s, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OclError, Result};
use crate::scalar::Scalar;

/// Which of the two contrastive branches a group feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "U")]
    Upper,
    #[serde(rename = "L")]
    Lower,
}

impl Branch {
    pub fn index(self) -> usize {
        match self {
            Branch::Upper => 0,
            Branch::Lower => 1,
        }
    }
}

/// Visible patches per branch: `floor((1 - r) * N / 2)`.
///
/// A tiny slack absorbs float error in `(1 - r) * N` so that, e.g.,
/// `r = 0.3, N = 20` gives 7 rather than 6.
pub fn group_size(num_patches: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(OclError::config(
            "masking.ratio",
            format!("masked ratio {ratio} outside [0, 1)"),
        ));
    }
    let n = ((1.0 - ratio) * num_patches as f64 / 2.0 + 1e-9).floor() as usize;
    if n == 0 {
        return Err(OclError::config(
            "masking.ratio",
            format!(
                "ratio {ratio} on {num_patches} patches leaves n = 0 visible patches per group"
            ),
        ));
    }
    Ok(n)
}

/// Fraction of all patches one branch sees.
pub fn branch_visible_ratio(num_patches: usize, ratio: f64) -> Result<f64> {
    Ok(group_size(num_patches, ratio)? as f64 / num_patches as f64)
}

/// Per-image patch indices of both groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub ratio: f64,
    pub num_patches: usize,
    pub group_size: usize,
    pub upper: Vec<Vec<usize>>,
    pub lower: Vec<Vec<usize>>,
}

impl MaskPlan {
    pub fn batch_size(&self) -> usize {
        self.upper.len()
    }

    pub fn indices(&self, branch: Branch) -> &[Vec<usize>] {
        match branch {
            Branch::Upper => &self.upper,
            Branch::Lower => &self.lower,
        }
    }

    /// The same plan with the two groups exchanged.
    pub fn swapped(&self) -> MaskPlan {
        MaskPlan {
            upper: self.lower.clone(),
            lower: self.upper.clone(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draws a uniform permutation of the patches of every image, keeps the
/// first `2n` as visible, gives the first `n` to the upper group and the next
/// `n` to the lower group. The rest are discarded.
pub fn sample_mask_plan(
    rng: &mut impl Rng,
    batch: usize,
    num_patches: usize,
    ratio: f64,
) -> Result<MaskPlan> {
    let n = group_size(num_patches, ratio)?;
    let mut upper = Vec::with_capacity(batch);
    let mut lower = Vec::with_capacity(batch);
    let mut perm: Vec<usize> = (0..num_patches).collect();
    for _ in 0..batch {
        perm.sort_unstable();
        perm.shuffle(rng);
        upper.push(perm[..n].to_vec());
        lower.push(perm[n..2 * n].to_vec());
    }
    Ok(MaskPlan {
        ratio,
        num_patches,
        group_size: n,
        upper,
        lower,
    })
}

/// One branch of encoder input: `[B, n + 1, D]` tokens with the `[CLS]`
/// token in slot 0 and positions already added.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroup<T> {
    pub tokens: Array3<T>,
    pub source_indices: Vec<Vec<usize>>,
    pub branch: Branch,
}

/// Builds the encoder input of one branch:
/// `tokens[:, 0] = cls + pos[0]`, `tokens[:, j + 1] = x[:, idx_j] + pos[idx_j + 1]`.
pub fn gather_group<T: Scalar>(
    x: ArrayView3<'_, T>,
    plan: &MaskPlan,
    branch: Branch,
    cls: ArrayView1<'_, T>,
    pos_table: ArrayView2<'_, T>,
) -> Result<TokenGroup<T>> {
    let indices = plan.indices(branch);
    let (b, n_patches, d) = x.dim();
    if indices.len() != b || pos_table.nrows() != n_patches + 1 || pos_table.ncols() != d {
        return Err(OclError::Shape {
            op: "gather_group",
            detail: format!(
                "x {:?}, plan for {} images, pos table {:?}",
                x.dim(),
                indices.len(),
                pos_table.dim()
            ),
        });
    }
    gather(x, indices, cls, pos_table).map(|tokens| TokenGroup {
        tokens,
        source_indices: indices.to_vec(),
        branch,
    })
}

/// The unmasked input used at evaluation time: every patch in order behind a
/// single `[CLS]` token.
pub fn full_group<T: Scalar>(
    x: ArrayView3<'_, T>,
    cls: ArrayView1<'_, T>,
    pos_table: ArrayView2<'_, T>,
) -> Result<Array3<T>> {
    let (b, n, _) = x.dim();
    let all: Vec<Vec<usize>> = vec![(0..n).collect(); b];
    gather(x, &all, cls, pos_table)
}

fn gather<T: Scalar>(
    x: ArrayView3<'_, T>,
    indices: &[Vec<usize>],
    cls: ArrayView1<'_, T>,
    pos_table: ArrayView2<'_, T>,
) -> Result<Array3<T>> {
    let (b, n_patches, d) = x.dim();
    let n = indices.first().map_or(0, Vec::len);
    let mut tokens = Array3::<T>::zeros((b, n + 1, d));
    let cls_row = &cls + &pos_table.row(0);
    for (img, idx) in indices.iter().enumerate() {
        if idx.len() != n {
            return Err(OclError::Shape {
                op: "gather_group",
                detail: format!("image {img} has {} indices, expected {n}", idx.len()),
            });
        }
        tokens.slice_mut(s![img, 0, ..]).assign(&cls_row);
        for (j, &p) in idx.iter().enumerate() {
            if p >= n_patches {
                return Err(OclError::Shape {
                    op: "gather_group",
                    detail: format!("patch index {p} out of range for {n_patches} patches"),
                });
            }
            let mut dst = tokens.slice_mut(s![img, j + 1, ..]);
            dst.assign(&x.slice(s![img, p, ..]));
            dst += &pos_table.row(p + 1);
        }
    }
    Ok(tokens)
}
