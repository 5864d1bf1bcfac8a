use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{pretrain, train_joint, TrainConfig, TrainError};
use crate::autograd::Checkpoint;
use crate::retrieval::evaluate;
use crate::synthdata::DatasetSplit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "lambda_G")]
    LambdaG,
    #[serde(rename = "lambda_D")]
    LambdaD,
}

impl SweepParam {
    fn set(self, config: &mut TrainConfig, value: f64) {
        match self {
            Self::LambdaG => config.lambda_g = value,
            Self::LambdaD => config.lambda_d = value,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LambdaG => "lambda_G",
            Self::LambdaD => "lambda_D",
        })
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lambda_g" => Ok(Self::LambdaG),
            "lambda_d" => Ok(Self::LambdaD),
            _ => Err(format!(
                "unknown sweep parameter {s:?} (expected lambda_G or lambda_D)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// One joint training run and evaluation per value, in input order.
///
/// Pretraining does not depend on either weight, so one pretrained model
/// (given, or trained from `config`) seeds every run.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    split: &DatasetSplit,
    config: &TrainConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<Vec<SweepRow>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    let owned;
    let pretrained = match pretrained {
        Some(ck) => ck,
        None => {
            owned = pretrain(split, config)?.to_checkpoint();
            &owned
        }
    };
    values
        .iter()
        .map(|&value| {
            let mut cfg = config.clone();
            param.set(&mut cfg, value);
            let trained = train_joint(split, &cfg, pretrained)?;
            let (m, _) = evaluate(split, trained.model())?;
            Ok(SweepRow {
                value,
                rank1: m.rank1,
                rank5: m.rank5,
                rank10: m.rank10,
                map: m.map,
            })
        })
        .collect()
}
