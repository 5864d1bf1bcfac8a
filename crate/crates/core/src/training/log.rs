use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Per-epoch mean loss terms; absent terms were not computed by the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub variant: String,
    #[serde(rename = "l_I")]
    pub l_i: f64,
    #[serde(rename = "l_adv_D")]
    pub l_adv_d: Option<f64>,
    #[serde(rename = "l_adv_G")]
    pub l_adv_g: Option<f64>,
    pub l_sc: Option<f64>,
    pub alignment_loss: Option<f64>,
    pub generator_objective: Option<f64>,
}

pub fn write_training_log(rows: &[LogRow], path: &Path) -> Result<(), TrainError> {
    let io = |e: csv::Error| TrainError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "variant",
            "l_I",
            "l_adv_D",
            "l_adv_G",
            "l_sc",
            "alignment_loss",
            "generator_objective",
        ])
        .map_err(io)?;
    }
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_training_log(path: &Path) -> Result<Vec<LogRow>, TrainError> {
    let io = |e: csv::Error| TrainError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().map(|row| row.map_err(io)).collect()
}
