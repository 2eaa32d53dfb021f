//! Evaluation reports: matching rate plus utility aggregates per row.

use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::metrics::{face_distances, matching_rate_from_distances, utility_summary, ThresholdCalibration, UtilitySummary};
use crate::models::EmbeddingHandle;
use crate::{Error, Result};

/// One evaluated setting: a budget level, a distortion magnitude or an
/// adversary parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    /// Budget, magnitude or adversary parameter the row was produced at.
    pub parameter: f64,
    pub images: usize,
    pub matching_rate: f64,
    /// Modified inputs against the originals.
    pub utility: UtilitySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub threshold: f64,
    pub rows: Vec<ReportRow>,
}

impl EvaluationReport {
    pub fn new(run_id: impl Into<String>, calibration: &ThresholdCalibration) -> Self {
        Self {
            run_id: run_id.into(),
            threshold: calibration.threshold,
            rows: Vec::new(),
        }
    }

    pub fn matching_rates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.matching_rate).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Scores one setting. `targets` are the clean images, `modified` what the
/// defender released, `reconstructions` what the adversary recovered.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_row(
    label: &str,
    level: Option<usize>,
    parameter: f64,
    embedder: &EmbeddingHandle,
    calibration: &ThresholdCalibration,
    targets: &[ImageTensor],
    modified: &[ImageTensor],
    reconstructions: &[ImageTensor],
) -> Result<ReportRow> {
    let distances = face_distances(embedder, targets, reconstructions)?;
    Ok(ReportRow {
        label: label.to_string(),
        level,
        parameter,
        images: targets.len(),
        matching_rate: matching_rate_from_distances(&distances, calibration)?,
        utility: utility_summary(targets, modified)?,
    })
}
