//! Saccade attention networks on a small, deterministic autodiff core.
//!
//! The pipeline: a teacher ViT is trained, its attention rollout picks the
//! top-k patches per image, a residual CNN (the selector) learns to predict
//! those patches, and a student ViT attends only over the selected patches.
//! [`cost`] accounts parameters and FLOPs for every model.

pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rollout;
pub mod san;
pub mod sanvit;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Conv2dSpec, Tape, Var};
pub use tensor::{Scalar, Tensor};
