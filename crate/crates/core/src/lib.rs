//! Continuous-relaxation pruning with learned presence parameters.
//!
//! Each weight `ω` carries a presence parameter `t`; the forward pass uses
//! `θ = ω·H(t)`. A global pressure term pushes every `t` down at the same
//! rate while the task loss pulls important weights back. The scheduler in
//! [`pressure`] adapts the pressure once per epoch to follow a target
//! sparsity curve.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod flops;
pub mod mask;
pub mod net;
pub mod optim;
pub mod powerlaw;
pub mod pressure;
pub mod saliency;
pub mod tensor;
pub mod trainer;

pub use error::*;
pub use net::MaskedNet;
pub use tensor::Tensor;
