//! Two-stage training: image-branch pretraining on semantic ids, then joint
//! adversarial training of all four networks.
//!
//! Training runs in `f32`. Batch order is a pure function of `(seed, phase,
//! epoch)`, so a [`Trainer`] checkpoint taken between any two steps resumes
//! onto exactly the trajectory of an uninterrupted run.

mod log;
mod step;
mod sweep;
mod trainer;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, CheckpointError, OptimizerKind, WeightDecayMode};
use crate::losses::{LossWeights, Variant};
use crate::retrieval::EvalError;
use crate::synthdata::DataError;

pub use log::{read_training_log, write_training_log, LogRow};
pub use step::{
    concepts, discriminator_objective, generator_objective, Batch, DiscriminatorPass, GeneratorPass,
};
pub use sweep::{sweep, SweepParam, SweepRow};
pub use trainer::{model_config, pretrain, train_joint, Phase, Stage, StepReport, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr_attribute: f64,
    pub lr_image: f64,
    pub lr_pretrain: f64,
    pub lr_discriminator: f64,
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub lambda_align: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    pub optimizer: OptimizerKind,
    pub d_steps_per_g_step: usize,
    /// Write a checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Keep the image extractor fixed during joint training.
    pub freeze_image_branch: bool,
    pub embedding_size: usize,
    pub image_head_tanh: bool,
    pub discriminator_zero_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            seed: 0,
            pretrain_epochs: 100,
            joint_epochs: 300,
            batch_size: 128,
            lr_attribute: 0.01,
            lr_image: 0.001,
            lr_pretrain: 0.01,
            lr_discriminator: 0.01,
            lambda_g: 0.001,
            lambda_d: 0.5,
            lambda_align: 1.0,
            weight_decay: 5e-4,
            decay_mode: WeightDecayMode::Decoupled,
            optimizer: OptimizerKind::Adam,
            d_steps_per_g_step: 1,
            checkpoint_every: 0,
            freeze_image_branch: false,
            embedding_size: 128,
            image_head_tanh: false,
            discriminator_zero_head: false,
        }
    }
}

impl TrainConfig {
    /// Reduced epoch counts for the synthetic desk-scale data.
    pub fn desk() -> Self {
        Self {
            pretrain_epochs: 30,
            joint_epochs: 30,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_g: self.lambda_g,
            lambda_d: self.lambda_d,
            lambda_align: self.lambda_align,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step must be positive".into());
        }
        if self.embedding_size == 0 {
            return bad("embedding_size must be positive".into());
        }
        let rates = [
            ("lr_attribute", self.lr_attribute),
            ("lr_image", self.lr_image),
            ("lr_pretrain", self.lr_pretrain),
            ("lr_discriminator", self.lr_discriminator),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        self.weights()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("non-finite value in {phase} epoch {epoch} batch {batch}: {source}")]
    NonFinite {
        phase: Phase,
        epoch: usize,
        batch: usize,
        source: AutogradError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not fit this run: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl TrainError {
    /// True for failures caused by NaN or infinite values.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite { .. } | Self::Autograd(AutogradError::NonFinite { .. })
        )
    }
}
