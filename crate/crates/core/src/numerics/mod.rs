//! Dense tensors, reverse-mode differentiation over a closed op set, SGD,
//! seeded RNG streams and the `.tnsr` on-disk format.

mod graph;
mod kernels;
mod rng;
mod sgd;
mod tensor;
pub mod tnsr;

pub use graph::{softmax_rows, Graph, OpKind, Var, NORM_EPS};
pub use rng::{seeded_rng, RngStream};
pub use sgd::SgdState;
pub use tensor::Tensor;
