//! TransVG-style visual grounding at desk scale: a reverse-mode autodiff
//! engine, transformer encoders, the visual/linguistic branches, the
//! visual-linguistic fusion module with a `[REG]` token, box losses and
//! training.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for training, `f64`
//! for finite-difference checks); the aliases below fix the common choices.

pub mod boxes;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod linguistic;
pub mod model;
mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod visual;

pub use boxes::{accuracy_at_iou, giou, grounding_loss, iou, smooth_l1, BBox, LossConfig, LossTerms};
pub use error::{Error, Result};
pub use fusion::RegInitMode;
pub use model::{Inference, ModelConfig, Prediction, TransVg};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use train::{evaluate, fit, EpochRecord, Evaluation, Example, TrainConfig, Trainer};
pub use params::{ParamGroup, ParamId, ParamStore, Session, SessionOptions};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type TransVg32 = TransVg<f32>;
pub type TransVg64 = TransVg<f64>;
