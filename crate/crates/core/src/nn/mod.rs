//! Tensor substrate: reverse-mode autodiff, layers, losses and AdamW.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Spread, Unary, Var};
pub use layers::{Builder, Conv2d, ConvT2d, CrossAttention, Dense, Init, LayerNorm};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
