//! Convolutional sparse coding layers solved by unrolled FISTA and trained
//! end to end, with residual-driven robust inference.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod csc_layer;
pub mod error;
pub mod fista;
pub mod nn;
pub mod robust;
pub mod tensor;
pub mod viz;

pub use conv::ConvDictionary;
pub use csc_layer::{CscGrads, CscLayer};
pub use error::{Error, Result};
pub use fista::{FistaConfig, FistaTrace};
pub use tensor::{Norms, Tensor};
