//! Network, tape autodiff, optimizer, and the two-stage training loop.

pub mod checkpoint;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{Model, ModelConfig};
pub use optim::{adam_step, AdamState};
pub use tape::{LossKind, Tape, Var};
pub use tensor::Tensor;
pub use train::{
    mask_centroid_pose, prepare_frame, train_two_stage, EpochLog, TrainConfig, TrainFrame,
    TrainMode,
};
