//! Patchification, the frozen patch projection and sinusoidal positions.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::ImageBatch;
use crate::error::{OclError, Result};
use crate::scalar::{digest, Scalar};

/// Splits `[B, C, H, W]` images into `[B, N, C*P*P]` patch rows.
///
/// Patches are numbered row-major from the top-left corner; within a patch
/// the vector is channel-planar, then row-major (`c, dy, dx`).
pub fn patchify<T: Scalar>(images: &ImageBatch, patch: usize) -> Result<Array3<T>> {
    let (b, c, h, w) = images.pixels.dim();
    check_divisible(h, w, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array3::<T>::zeros((b, gh * gw, c * patch * patch));
    for img in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let src = images.pixels.slice(s![
                    img,
                    ..,
                    gy * patch..(gy + 1) * patch,
                    gx * patch..(gx + 1) * patch
                ]);
                let mut dst = out.slice_mut(s![img, gy * gw + gx, ..]);
                for (d, &v) in dst.iter_mut().zip(src.iter()) {
                    *d = T::of(v as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: ArrayView3<'_, T>,
    patch: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Array4<f32>> {
    check_divisible(height, width, patch)?;
    let (b, n, len) = patches.dim();
    let (gh, gw) = (height / patch, width / patch);
    if n != gh * gw || len != channels * patch * patch {
        return Err(OclError::Shape {
            op: "unpatchify",
            detail: format!("patches {:?} do not tile {channels}x{height}x{width}", patches.dim()),
        });
    }
    let mut out = Array4::<f32>::zeros((b, channels, height, width));
    for img in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let src = patches.slice(s![img, gy * gw + gx, ..]);
                let mut dst = out.slice_mut(s![
                    img,
                    ..,
                    gy * patch..(gy + 1) * patch,
                    gx * patch..(gx + 1) * patch
                ]);
                for (d, &v) in dst.iter_mut().zip(src.iter()) {
                    *d = v.as_f64() as f32;
                }
            }
        }
    }
    Ok(out)
}

fn check_divisible(h: usize, w: usize, patch: usize) -> Result<()> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(OclError::config(
            "model.patch_size",
            format!("{h}x{w} is not divisible by patch size {patch}"),
        ));
    }
    Ok(())
}

/// Half-width of the Xavier (Glorot) uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws a `[fan_in, fan_out]` matrix i.i.d. from `U[-a, a]` with the Xavier
/// bound `a`. Values are sampled in `f64` so `f32` and `f64` models built
/// from the same seed agree up to rounding.
pub fn xavier_uniform<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<T> {
    let a = xavier_bound(fan_in, fan_out);
    Array2::from_shape_simple_fn((fan_in, fan_out), || T::of(rng.random_range(-a..=a)))
}

pub fn init_frozen_projection<T: Scalar>(seed: u64, in_dim: usize, dim: usize) -> Result<Array2<T>> {
    if dim == 0 || in_dim == 0 {
        return Err(OclError::config("model.dim", "projection dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(xavier_uniform(&mut rng, in_dim, dim))
}

/// Fixed sinusoidal position table with `rows` positions:
/// `pos[k, 2j] = sin(k / 10000^(2j/D))`, `pos[k, 2j+1] = cos(k / 10000^(2j/D))`.
pub fn sinusoidal_table<T: Scalar>(rows: usize, dim: usize) -> Result<Array2<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(OclError::config(
            "model.dim",
            format!("sinusoidal positions need an even dimension, got {dim}"),
        ));
    }
    let mut table = Array2::<T>::zeros((rows, dim));
    for k in 0..rows {
        for j in 0..dim / 2 {
            let angle = k as f64 / 10000f64.powf(2.0 * j as f64 / dim as f64);
            table[[k, 2 * j]] = T::of(angle.sin());
            table[[k, 2 * j + 1]] = T::of(angle.cos());
        }
    }
    Ok(table)
}

/// `[B, N, L] x [L, D] -> [B, N, D]`, no positions added.
pub fn embed<T: Scalar>(patches: ArrayView3<'_, T>, projection: ArrayView2<'_, T>) -> Result<Array3<T>> {
    let (b, n, len) = patches.dim();
    if len != projection.nrows() {
        return Err(OclError::Shape {
            op: "embed",
            detail: format!("patch length {len} vs projection rows {}", projection.nrows()),
        });
    }
    let flat = patches
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * n, len))
        .expect("standard layout");
    let out = flat.dot(&projection);
    Ok(out
        .into_shape_with_order((b, n, projection.ncols()))
        .expect("row count preserved"))
}

/// The frozen patch stem: projection and position table. Nothing in here is
/// ever touched by an optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed<T> {
    pub patch_size: usize,
    pub channels: usize,
    pub num_patches: usize,
    /// `[P*P*C, D]`
    pub projection: Array2<T>,
    /// `[N + 1, D]`; row 0 is the `[CLS]` position.
    pub pos_table: Array2<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(
        seed: u64,
        image_size: usize,
        channels: usize,
        patch_size: usize,
        dim: usize,
    ) -> Result<Self> {
        check_divisible(image_size, image_size, patch_size)?;
        let num_patches = (image_size / patch_size).pow(2);
        let in_dim = patch_size * patch_size * channels;
        Ok(Self {
            patch_size,
            channels,
            num_patches,
            projection: init_frozen_projection(seed, in_dim, dim)?,
            pos_table: sinusoidal_table(num_patches + 1, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Patchify and project a batch: `[B, N, D]`.
    pub fn embed_images(&self, images: &ImageBatch) -> Result<Array3<T>> {
        if images.channels() != self.channels {
            return Err(OclError::config(
                "data.channels",
                format!("{} channels, model expects {}", images.channels(), self.channels),
            ));
        }
        let patches = patchify::<T>(images, self.patch_size)?;
        if patches.len_of(Axis(1)) != self.num_patches {
            return Err(OclError::config(
                "data.image_size",
                format!(
                    "{} patches per image, model expects {}",
                    patches.len_of(Axis(1)),
                    self.num_patches
                ),
            ));
        }
        embed(patches.view(), self.projection.view())
    }

    pub fn projection_digest(&self) -> String {
        digest(self.projection.iter().copied())
    }
}
