//! Normalizing-flow density estimation with exact log-determinants.
//!
//! The model stacks invertible blocks (a squeezing k x k convolution, a dual
//! affine coupling whose scales are bounded by a Mexican-hat head, and a
//! monotone rational-quadratic activation) inside a multi-scale
//! architecture. Likelihoods are exact, gradients come from an analytic
//! reverse sweep, and every analytic quantity has a finite-difference
//! counterpart in [`flow::numeric`].

pub mod check;
pub mod config;
pub mod error;
pub mod exec;
pub mod flow;
pub mod layers;
pub mod linalg;
pub mod qlf;
pub mod special;
pub mod training;

pub use config::{Ablation, DataSpec, ModelConfig, ModelKind, RunConfig, TrainConfig};
pub use error::{FlowError, Result};
pub use exec::Exec;
pub use flow::layer::{layer_apply, Bijector, Direction, Layer, LayerKind, Shape};
pub use flow::model::{multiscale_compose, nll_bits_per_dim, BaseDist, FlowModel};
pub use linalg::Matrix;
