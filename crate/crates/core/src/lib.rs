//! Occluded image contrastive learning (OCL) for small vision transformers.
//!
//! Images are patchified and embedded with a frozen projection, randomly
//! masked, and the visible patches are split into two disjoint groups. Each
//! group gets its own `[CLS]` token and runs through a pre-norm ViT; the two
//! `[CLS]` outputs are contrasted across the batch with a T-distributed
//! spherical similarity and a symmetric cross-entropy.
//!
//! Everything numeric is hand-written on top of `ndarray`, including the
//! backward passes, so the whole pipeline runs in `f32` for training and in
//! `f64` for gradient verification.

pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod masking;
pub mod objective;
pub mod oracle;
pub mod patching;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use config::RunConfig;
pub use error::{OclError, Result};
pub use scalar::Scalar;
