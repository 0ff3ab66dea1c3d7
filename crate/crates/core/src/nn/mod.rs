//! Minimal CNN inference engine with instrumented forward passes and two
//! max-pool kernels: a branchy one whose work depends on the data and a
//! select-based one whose work does not.

mod custom;
mod forward;
pub(crate) mod kernels;
mod spec;

pub use custom::{build_custom_cnn, build_custom_cnn_with, CUSTOM_POOL};
pub use forward::{
    forward_trace, model_forward, pool_update_counts, ForwardTrace, InstrumentedOutput,
};
pub use kernels::{
    argmax, avgpool_forward, conv2d_forward, dense_forward, maxpool_forward, relu_forward,
    softmax, MaxPoolOutput,
};
pub use spec::{
    Conv2d, Dense, LayerSpec, ModelSpec, PoolVariant, PoolWindow, MODEL_FORMAT_VERSION,
};
