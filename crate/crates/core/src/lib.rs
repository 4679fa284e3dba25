pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod par;
pub mod param;
pub mod refine;
pub mod swin;
pub mod tensor;
pub mod train;

pub use autograd::{Activation, Graph, PoolMode, Var};
pub use error::{CheckpointError, Error, Result};
pub use network::{Model, ModelConfig, Scale};
pub use tensor::{Element, Shape, Tensor};
