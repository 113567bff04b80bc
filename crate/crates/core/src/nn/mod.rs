//! Small reverse-mode autodiff engine and the layers built on it.

mod denoiser;
mod graph;
mod layers;
mod params;
mod tensor;

pub use denoiser::{sinusoidal, ArchConfig, ConditionBundle, Denoiser};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use layers::{
    ConformerBlock, ConvModule, Ctx, DitBlock, FeedForward, LayerNorm, Linear, Mlp, SelfAttention, Trainable,
};
pub use params::{ParamEntry, ParamId, ParamStore, Stage};
pub use tensor::Tensor;

pub(crate) use params::hex;
