//! Small neural network toolkit: the layer kinds needed by the two encoder
//! branches, hand-written backward passes and an optimizer.
//!
//! Tensors are `f64`, channels-last. A batch of audio segments is
//! `[N, frames, bands, channels]`, a batch of movement segments `[N, frames, features]`.

mod branch;
mod layers;
mod optim;
mod tensor;

pub use branch::{
    audio_specs, movement_specs, Branch, BranchGrads, ForwardPass, LayerCount, ParamCounts, AUDIO_INPUT,
    MOVEMENT_INPUT,
};
pub use layers::{
    tanh_backward, tanh_forward, AvgPool2d, BatchNorm, BatchNormCache, BatchNormConfig, BatchStats,
    Conv2d, Conv2dCache, Gru, GruCache, LayerSpec, Mode,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use tensor::{Param, Tensor};
