//! Reverse-mode differentiation engine and the DepAudioNet backbone.

pub mod checkpoint;
pub(crate) mod kernels;
pub mod model;
pub mod optim;
pub mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION,
};
pub use model::{
    classify_segments, embed_segments, forward_depaudionet, init_params, BoundParams,
    DepAudioNetParams, Embedding, ForwardPass, ModelDims, ModelOutput, OutputMode,
};
pub use optim::{sgd_step, sgd_update, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
