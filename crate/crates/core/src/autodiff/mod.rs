//! Minimal reverse-mode automatic differentiation over float64 tensors.

pub mod functional;
mod gemm;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use ops::conv::ConvMode;
pub use ops::elementwise::Activation;
pub use ops::norm::{GroupStats, NormKind, NORM_EPS};
pub use params::{adam_step, AdamConfig, AdamState, BnRecord, Bound, ParamId, ParamSet, Pass};
pub use tape::{Backward, Tape, Var};
pub use tensor::Tensor;
