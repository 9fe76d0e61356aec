//! Dense tensors, a reverse-mode tape, layers, AdamW and checkpoints.
//!
//! Values are `f64` throughout. A [`Graph`] records every operation applied to
//! its [`Var`] handles; [`Graph::backward`] walks the tape in reverse and
//! [`ParamStore::accumulate_grads`] copies parameter gradients out.

mod conv;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use conv::ConvSpec;
pub(crate) use conv::gemm as conv_gemm;
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{read_checkpoint, write_checkpoint, ParamId, ParamStore};
pub use tensor::{FeatureMap, Tensor};

/// Normalization behaviour of batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
