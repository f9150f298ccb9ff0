//! Construction, static analysis, execution and training of the L-Mobilenet
//! bottleneck architecture alongside MobileNetV2 and ShuffleNetV2 baselines.

pub mod analysis;
pub mod blocks;
pub mod dataio;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod profile;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{ModelGraph, NodeId};
pub use tensor::{DType, Matrix, Scalar, Shape, Tensor};
