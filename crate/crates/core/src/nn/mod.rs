//! Differentiable primitives on a reverse-mode tape.

pub mod checkpoint;
pub mod ops;
pub mod params;
pub mod spectral;
pub mod tape;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta, TensorEntry};
pub use ops::{
    attention, multi_head_attention, AttentionWeights, complex_abs, conv1d, conv2d, gain_shape, glu, l2_normalize, linear, power_iteration,
    rms_norm, rotary, rotary_embed, spectral_norm_apply, spectral_normalize, Conv1dSpec, PaddingMode,
};
pub use params::{round_to_f32, uniform_init, Bound, ParameterStore, Tensor};
pub use tape::{Array, GradSink, Gradients, Tape, Var};
