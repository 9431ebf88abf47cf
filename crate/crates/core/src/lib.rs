//! Pose-driven spatio-temporal attention for video classification, with
//! two cross-modal distillation routes that let an RGB-only student absorb
//! what a skeleton teacher knows:
//!
//! * feature level: a supervised contrastive objective over matched and
//!   mismatched video/pose pairs against a frozen pose network;
//! * attention level: a self-attention student whose saliency is pulled
//!   toward the attention map of a video-pose network trained alongside it.
//!
//! The crate is organised bottom-up: [`autograd`] supplies reverse-mode
//! differentiation, [`syndata`] produces paired clips and skeletons,
//! [`backbones`] and [`vpn`] hold the networks, [`distill`] the losses, and
//! [`trainer`] the recipes, evaluation, checkpoints and timing.

pub mod autograd;
pub mod backbones;
pub mod distill;
pub mod error;
pub mod params;
pub mod rng;
pub mod syndata;
pub mod trainer;
pub mod vpn;

pub use autograd::{Tape, Tensor, Var};
pub use error::{Error, Result};
