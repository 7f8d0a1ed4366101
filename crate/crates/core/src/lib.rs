//! Task distances from diagonal Fisher information, task-guided cell
//! search, and SGD iterate-averaging checks on quadratic models.

pub mod cli;
pub mod error;
pub mod fisher;
pub mod fuse;
pub mod graph;
pub mod idx;
mod kernels;
pub mod networks;
pub mod search_space;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use graph::{ComputeGraph, GraphBuilder, LossKind, NodeId, Op};
pub use kernels::{Conv2dParams, Pool2dParams};
pub use tensor::{Tensor, TensorMap};
