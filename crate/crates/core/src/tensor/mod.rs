//! Dense tensors, reverse-mode autodiff, the causal transformer block and
//! first-order optimizers.

mod attention;
mod dense;
mod optim;
mod params;
mod tape;

pub use attention::{causal_attention, AttentionCache, AttentionParams, BlockParams, TransformerConfig};
pub use dense::{softmax, Tensor};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Graph, NodeGrads, NodeId, Tape};
