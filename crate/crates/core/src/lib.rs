//! Understanding-guided video object removal at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`video`]: clip tensors, binary masks, frame-directory and manifest I/O.
//! - [`synthdata`]: procedural paired clips with shadows and reflections.
//! - [`maskops`]: difference / side-effect masks and their token-grid projection.
//! - [`relation`]: teacher encoders, the relation adapter, cosine relation matrices
//!   and the object-induced relation distillation loss.
//! - [`denoiser`]: the flow-matching diffusion transformer with framewise
//!   context cross-attention.
//! - [`trainer`]: the composite objective, keyframe augmentation, the training
//!   loop and finite-difference gradient verification.
//! - [`kgp`]: keyframe-guided propagation for videos longer than the training window.
//! - [`evalbench`]: PSNR / SSIM and paired benchmark reports.

pub mod denoiser;
pub mod error;
pub mod evalbench;
pub mod kgp;
pub mod maskops;
pub mod nn;
pub mod relation;
pub mod synthdata;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
pub use video::{ClipManifest, ManifestEntry, MaskTensor, VideoTensor};
