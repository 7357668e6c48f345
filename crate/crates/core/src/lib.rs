//! Progressive channel pruning for convolutional networks.

pub mod data;
pub mod error;
pub mod finetune;
pub mod model;
pub mod numerics;
pub mod pcp;
pub mod prune;
pub mod sampler;
pub mod tensor;
pub mod toybench;
pub mod transfer;

pub use error::{PcpError, Result};
pub use tensor::Tensor;
