//! JSON run configuration. Every file is optional; keys left out keep their
//! defaults and unknown keys are rejected. Command-line flags override the file.

use std::fs;
use std::path::Path;

use airid::losses::Variant;
use airid::synthdata::{AttributeSchema, RenderConfig, SplitConfig};
use airid::training::TrainConfig;
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliResult, Context, Failure};

/// `airid synth` configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub imgs_per_id_per_view: usize,
    pub seed: u64,
    pub render: RenderConfig,
    pub schema: AttributeSchema,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SplitConfig::default();
        Self {
            n_train_ids: s.n_train_ids,
            n_test_ids: s.n_test_ids,
            imgs_per_id_per_view: s.imgs_per_id_per_view,
            seed: s.seed,
            render: RenderConfig::default(),
            schema: AttributeSchema::default_desk(),
        }
    }
}

impl SynthConfig {
    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            n_train_ids: self.n_train_ids,
            n_test_ids: self.n_test_ids,
            imgs_per_id_per_view: self.imgs_per_id_per_view,
            seed: self.seed,
        }
    }
}

/// Reads a config file, or the defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).ctx(format!("reading config {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::usage(anyhow::anyhow!("config {}: {e}", path.display())))
}

/// Flags that override keys of a training config.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainOverrides {
    /// Loss variant: full, no-adv, no-sc, mmd, coral or img2a.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long = "lambda-g")]
    pub lambda_g: Option<f64>,
    #[arg(long = "lambda-d")]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(v) = self.lambda_g {
            cfg.lambda_g = v;
        }
        if let Some(v) = self.lambda_d {
            cfg.lambda_d = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

pub fn train_config(path: Option<&Path>, overrides: &TrainOverrides) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
