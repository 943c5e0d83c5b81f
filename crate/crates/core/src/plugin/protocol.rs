//! Wire documents exchanged with stage plugins through `request.json` and
//! `response.json`. Images always travel as absolute paths; trained models as
//! opaque directories written by the plugin.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Label, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRequest {
    pub method: Method,
    pub payload: serde_json::Value,
    pub workdir: PathBuf,
}

impl StageRequest {
    pub fn new<P: Serialize>(method: Method, payload: &P, workdir: PathBuf) -> Result<Self> {
        Ok(Self {
            method,
            payload: serde_json::to_value(payload)?,
            workdir,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResponse {
    pub status: ResponseStatus,
    #[serde(default)]
    pub result: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

impl StageResponse {
    pub fn ok<R: Serialize>(result: &R) -> Result<Self> {
        Ok(Self {
            status: ResponseStatus::Ok,
            result: serde_json::to_value(result)?,
            error_message: None,
        })
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self {
            status: ResponseStatus::Error,
            result: serde_json::Value::Null,
            error_message: Some(message.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetModelPayload {
    /// Directory the extractor may populate with its model.
    pub out_model_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetModelResult {
    #[serde(default)]
    pub model_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetFeatureVectorPayload {
    pub images: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_dir: Option<PathBuf>,
}

/// One vector per input image, in input order.
pub type GetFeatureVectorResult = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoTrainPayload {
    pub images: Vec<PathBuf>,
    pub image_labels: Vec<Label>,
    pub feature_vectors: Vec<Vec<f64>>,
    pub out_model_dir: PathBuf,
    /// Ordered class names of the job, when it has any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_schema: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoTrainResult {
    pub model_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoRunPayload {
    pub image: PathBuf,
    pub feature_vector: Vec<f64>,
    pub model_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoRunResult {
    pub label: Label,
    #[serde(default)]
    pub confidences: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConfidences {
    pub image_id: String,
    pub confidences: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetNextSamplesPayload {
    pub images: Vec<String>,
    pub predictions: Vec<ImageConfidences>,
    pub batch_size: usize,
    /// Seed for randomized samplers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetNextSamplesResult {
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdLabel {
    pub image_id: String,
    pub worker_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetConsensusPayload {
    pub images: Vec<String>,
    pub crowd_labels: Vec<CrowdLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_schema: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusLabel {
    pub image_id: String,
    pub label: Label,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetConsensusResult {
    pub consensus_labels: Vec<ConsensusLabel>,
}
