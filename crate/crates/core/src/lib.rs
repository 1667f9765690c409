//! Attentive feature refinement (AFR) for self-training unsupervised domain
//! adaptation of semantic segmentation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] and [`tensor`]: dense `f64` tensors, a tape-based
//!   reverse-mode differentiator and the elementary operations.
//! * [`gaussian`]: normalized Gaussian kernels, reflect-padded smoothing and
//!   high-frequency residuals.
//! * [`uncertainty`]: per-pixel uncertainty maps from softmax confidence.
//! * [`afr`]: the class-aware logit attention (CALA), uncertainty-suppressed
//!   HR feature attention (UHFA), their learnable fusion and the residual
//!   refinement of high-resolution features.
//! * [`segnet`]: a two-branch segmentation network hosting AFR.
//! * [`train`]: losses, EMA teacher, pseudo-labels, ClassMix, patch masking
//!   and the training loop.
//! * [`synthdata`]: a procedural two-domain segmentation dataset.
//! * [`metrics`], [`pnm`], [`checkpoint`], [`config`]: evaluation and I/O.
//! * [`gradcheck`]: finite-difference verification of every differentiable
//!   operation.

pub mod afr;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod metrics;
pub mod pnm;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{ClassMap, Tensor, IGNORE_ID};
