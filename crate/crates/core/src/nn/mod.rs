//! Minimal neural-network kernel: tensors on a recording tape, reverse-mode
//! gradients, Adam, finite-difference checking and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use adam::{AdamState, DEFAULT_LR};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use gradcheck::{
    gradient_check, gradient_check_piecewise, gradient_check_with_floor, relative_error, relative_error_with_floor,
    GradCheckReport, DEFAULT_ERROR_FLOOR,
};
pub use params::{BatchNormIds, BufferId, Conv1dBlock, EntryKind, LinearParams, ParamId, ParamStore, RegistryEntry};
pub use tape::{one_hot, Mode, NodeId, Tape, BN_EPS, PROB_EPS};
