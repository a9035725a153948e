//! Dense tensors, a reverse-mode tape over a fixed operator set, and Adam.

mod array;
mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;

pub use array::{gemm, MatMut, MatRef, Tensor};
pub use graph::{Grads, Graph, Var, LAYER_NORM_EPS};
pub use optim::{AdamConfig, OptimState};
pub use params::{trunc_normal, ParamId, ParamStore, Parameter, INIT_STD};
pub use scalar::Scalar;
