//! Differentiable building blocks around the CSC layer and the small
//! classifier assembled from them.

mod layers;
mod loss;
mod model;
mod sgd;

pub use layers::{BatchNorm2d, Conv2d, Flatten, Linear, Pool, PoolKind, Relu, Standardize};
pub use loss::{accuracy, argmax_rows, cross_entropy};
pub use model::{Layer, ModelGrads, ModelOutput, ParamInfo, ParamKind, SdNetLite, REFERENCE_ARCH};
pub use sgd::{Schedule, SgdConfig, SgdState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
