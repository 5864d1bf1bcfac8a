//! Dense tensors with tape-based reverse-mode differentiation, plus the
//! optimizers and checkpoint container used to train every network.
//!
//! A [`Tape`] records each forward op together with the values its backward
//! rule needs. [`Tape::backward`] consumes the tape and visits the ops in
//! exact reverse order, returning [`Gradients`] for every reachable leaf.
//! Model weights live in a [`ParamStore`] and are bound to a fresh tape on
//! every step, either trainable ([`Tape::param`]) or frozen
//! ([`Tape::param_frozen`]).

mod checkpoint;
mod error;
mod optim;
mod real;
mod store;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::AutogradError;
pub use optim::{
    adam_update, AdamConfig, AdamState, Moments, Optimizer, OptimizerKind, SgdConfig, SgdState,
    WeightDecayMode,
};
pub use real::Real;
pub use store::{Entry, EntryKind, ParamId, ParamStore};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
