//! Shared domain types and the job lifecycle state machine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plugin::{Approval, PluginDescriptor};
use crate::storage::DatasetManifest;

/// Tolerance applied to unit-square containment checks on geometric labels.
const GEOMETRY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationType {
    #[serde(alias = "Classification")]
    Classification,
    #[serde(alias = "BoundingBox")]
    BoundingBox,
    #[serde(alias = "ObjectContour")]
    ObjectContour,
    #[serde(alias = "ImageComparison")]
    ImageComparison,
}

impl AnnotationType {
    pub fn is_geometric(self) -> bool {
        matches!(self, AnnotationType::BoundingBox | AnnotationType::ObjectContour)
    }
}

/// The four pluggable pipeline slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    #[serde(alias = "FeatureExtraction")]
    FeatureExtraction,
    #[serde(alias = "Classifier")]
    Classifier,
    #[serde(alias = "TaskSampler")]
    TaskSampler,
    #[serde(alias = "Consensus")]
    Consensus,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [
        StageKind::FeatureExtraction,
        StageKind::Classifier,
        StageKind::TaskSampler,
        StageKind::Consensus,
    ];

    /// Protocol methods a plugin of this stage answers.
    pub fn methods(self) -> &'static [Method] {
        match self {
            StageKind::FeatureExtraction => &[Method::GetModel, Method::GetFeatureVector],
            StageKind::Classifier => &[Method::DoTrain, Method::DoRun],
            StageKind::TaskSampler => &[Method::GetNextSamples],
            StageKind::Consensus => &[Method::GetConsensus],
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StageKind::FeatureExtraction => "feature_extraction",
            StageKind::Classifier => "classifier",
            StageKind::TaskSampler => "task_sampler",
            StageKind::Consensus => "consensus",
        };
        f.write_str(s)
    }
}

/// Stage protocol method names, spelled as on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "getModel")]
    GetModel,
    #[serde(rename = "getFeatureVector")]
    GetFeatureVector,
    #[serde(rename = "doTrain")]
    DoTrain,
    #[serde(rename = "doRun")]
    DoRun,
    #[serde(rename = "getNextSamples")]
    GetNextSamples,
    #[serde(rename = "getConsensus")]
    GetConsensus,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::GetModel => "getModel",
            Method::GetFeatureVector => "getFeatureVector",
            Method::DoTrain => "doTrain",
            Method::DoRun => "doRun",
            Method::GetNextSamples => "getNextSamples",
            Method::GetConsensus => "getConsensus",
        }
    }

    pub fn stage(self) -> StageKind {
        match self {
            Method::GetModel | Method::GetFeatureVector => StageKind::FeatureExtraction,
            Method::DoTrain | Method::DoRun => StageKind::Classifier,
            Method::GetNextSamples => StageKind::TaskSampler,
            Method::GetConsensus => StageKind::Consensus,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrowdMode {
    #[serde(alias = "Private")]
    Private,
    #[serde(alias = "Public")]
    Public,
}

/// A single annotation value. The variant must match the job's annotation type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Label {
    #[serde(rename = "class")]
    ClassLabel { name: String },
    #[serde(rename = "bbox")]
    BBox { x: f64, y: f64, w: f64, h: f64 },
    Contour { vertices: Vec<[f64; 2]> },
    SameDifferent { flag: bool },
}

impl Label {
    pub fn class(name: impl Into<String>) -> Self {
        Label::ClassLabel { name: name.into() }
    }

    pub fn annotation_type(&self) -> AnnotationType {
        match self {
            Label::ClassLabel { .. } => AnnotationType::Classification,
            Label::BBox { .. } => AnnotationType::BoundingBox,
            Label::Contour { .. } => AnnotationType::ObjectContour,
            Label::SameDifferent { .. } => AnnotationType::ImageComparison,
        }
    }

    /// Categorical key used by the class-label consensus algorithms.
    /// Geometric labels have none.
    pub fn class_key(&self) -> Option<String> {
        match self {
            Label::ClassLabel { name } => Some(name.clone()),
            Label::SameDifferent { flag: true } => Some("same".to_string()),
            Label::SameDifferent { flag: false } => Some("different".to_string()),
            _ => None,
        }
    }

    /// Inverse of [`Label::class_key`] for the given annotation type.
    pub fn from_class_key(key: &str, annotation_type: AnnotationType) -> Result<Self> {
        match annotation_type {
            AnnotationType::Classification => Ok(Label::class(key)),
            AnnotationType::ImageComparison => match key {
                "same" => Ok(Label::SameDifferent { flag: true }),
                "different" => Ok(Label::SameDifferent { flag: false }),
                other => Err(Error::UnknownClass(other.to_string())),
            },
            other => Err(Error::WrongLabelType(format!(
                "{other:?} labels have no class key"
            ))),
        }
    }

    /// Checks the label against the owning job's annotation type and schema.
    pub fn validate(&self, annotation_type: AnnotationType, schema: &[String]) -> Result<()> {
        if self.annotation_type() != annotation_type {
            return Err(Error::WrongLabelType(format!(
                "expected {annotation_type:?}, got {:?}",
                self.annotation_type()
            )));
        }
        match self {
            Label::ClassLabel { name } => {
                if !schema.iter().any(|c| c == name) {
                    return Err(Error::UnknownLabel(name.clone()));
                }
            }
            Label::BBox { x, y, w, h } => {
                let ok = [x, y, w, h].iter().all(|v| v.is_finite())
                    && *x >= 0.0
                    && *y >= 0.0
                    && *w > 0.0
                    && *h > 0.0
                    && x + w <= 1.0 + GEOMETRY_EPS
                    && y + h <= 1.0 + GEOMETRY_EPS;
                if !ok {
                    return Err(Error::GeometryOutOfRange(format!(
                        "bbox ({x}, {y}, {w}, {h}) is not inside the unit square"
                    )));
                }
            }
            Label::Contour { vertices } => {
                if vertices.len() < 3 {
                    return Err(Error::GeometryOutOfRange(format!(
                        "contour needs at least 3 vertices, got {}",
                        vertices.len()
                    )));
                }
                let inside = |v: f64| v.is_finite() && (-GEOMETRY_EPS..=1.0 + GEOMETRY_EPS).contains(&v);
                if let Some(p) = vertices.iter().find(|p| !inside(p[0]) || !inside(p[1])) {
                    return Err(Error::GeometryOutOfRange(format!(
                        "contour vertex ({}, {}) is outside the unit square",
                        p[0], p[1]
                    )));
                }
            }
            Label::SameDifferent { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLabel {
    pub image_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopParams {
    pub batch_size: usize,
    pub redundancy_k: usize,
    pub holdout_fraction: f64,
    /// Per-job override of the plugin invocation timeout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invoke_timeout_secs: Option<u64>,
    /// Fixed seed for the sampler in place of one derived from the job id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler_seed: Option<u64>,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            batch_size: 10,
            redundancy_k: 3,
            holdout_fraction: 0.2,
            invoke_timeout_secs: None,
            sampler_seed: None,
        }
    }
}

/// Canonical `job.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    #[serde(default)]
    pub job_id: String,
    pub dataset_ref: String,
    pub annotation_type: AnnotationType,
    #[serde(default)]
    pub label_schema: Vec<String>,
    pub stage_mapping: BTreeMap<StageKind, String>,
    pub crowd_mode: CrowdMode,
    pub seed_labels: Vec<SeedLabel>,
    #[serde(default)]
    pub loop_params: LoopParams,
}

impl JobSpec {
    pub fn plugin_for(&self, stage: StageKind) -> Option<&str> {
        self.stage_mapping.get(&stage).map(String::as_str)
    }
}

/// Returns the spec unchanged when every job invariant holds.
pub fn validate_job_spec<F>(spec: JobSpec, lookup: F, dataset: &DatasetManifest) -> Result<JobSpec>
where
    F: Fn(&str) -> Option<PluginDescriptor>,
{
    for stage in StageKind::ALL {
        let id = spec
            .plugin_for(stage)
            .ok_or_else(|| Error::StageMismatch(format!("no plugin mapped for {stage}")))?;
        let plugin = lookup(id).ok_or_else(|| Error::UnknownPlugin(id.to_string()))?;
        if plugin.stage_kind.stage() != stage {
            return Err(Error::StageMismatch(format!(
                "plugin `{id}` implements {} but is mapped to {stage}",
                plugin.stage_kind.stage()
            )));
        }
        if !matches!(plugin.approval, Approval::Approved { .. }) {
            return Err(Error::UnapprovedPlugin(id.to_string()));
        }
    }

    match spec.annotation_type {
        AnnotationType::Classification => {
            let distinct: BTreeSet<&String> = spec.label_schema.iter().collect();
            if distinct.len() < 2 {
                return Err(Error::BadLabelSchema(
                    "classification needs at least two class names".into(),
                ));
            }
            if distinct.len() != spec.label_schema.len() {
                return Err(Error::BadLabelSchema("duplicate class names".into()));
            }
        }
        AnnotationType::BoundingBox | AnnotationType::ObjectContour => {
            if !spec.label_schema.is_empty() {
                return Err(Error::BadLabelSchema(
                    "geometric jobs take an empty label schema".into(),
                ));
            }
        }
        AnnotationType::ImageComparison => {}
    }

    let p = &spec.loop_params;
    if p.batch_size == 0 || p.redundancy_k == 0 || !(0.0..1.0).contains(&p.holdout_fraction) {
        return Err(Error::InvalidArgument(format!(
            "loop parameters out of range: {p:?}"
        )));
    }

    if spec.seed_labels.is_empty() {
        return Err(Error::EmptySeed);
    }
    let known: BTreeSet<&str> = dataset.items.iter().map(|i| i.image_id.as_str()).collect();
    let mut seen = BTreeSet::new();
    for seed in &spec.seed_labels {
        if !known.contains(seed.image_id.as_str()) {
            return Err(Error::UnknownSeedImage(seed.image_id.clone()));
        }
        if !seen.insert(seed.image_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "image `{}` has more than one seed label",
                seed.image_id
            )));
        }
        seed.label.validate(spec.annotation_type, &spec.label_schema)?;
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Created,
    FeaturesExtracted,
    SeedTrained,
    AwaitingCrowd,
    ConsensusReady,
    Retrained,
    Failed { cause: String },
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobState::Created => f.write_str("Created"),
            JobState::FeaturesExtracted => f.write_str("FeaturesExtracted"),
            JobState::SeedTrained => f.write_str("SeedTrained"),
            JobState::AwaitingCrowd => f.write_str("AwaitingCrowd"),
            JobState::ConsensusReady => f.write_str("ConsensusReady"),
            JobState::Retrained => f.write_str("Retrained"),
            JobState::Failed { cause } => write!(f, "Failed({cause})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoopEvent {
    FeaturesDone,
    SeedTrainDone,
    BatchOpened,
    BatchComplete,
    RetrainDone,
    FailureOccurred(String),
}

impl LoopEvent {
    fn name(&self) -> &'static str {
        match self {
            LoopEvent::FeaturesDone => "FeaturesDone",
            LoopEvent::SeedTrainDone => "SeedTrainDone",
            LoopEvent::BatchOpened => "BatchOpened",
            LoopEvent::BatchComplete => "BatchComplete",
            LoopEvent::RetrainDone => "RetrainDone",
            LoopEvent::FailureOccurred(_) => "FailureOccurred",
        }
    }
}

/// The job lifecycle transition relation. `Failed` has no outgoing edges.
pub fn job_state_transition(current: &JobState, event: &LoopEvent) -> Result<JobState> {
    use JobState::*;
    use LoopEvent::*;
    let next = match (current, event) {
        (Failed { .. }, _) => None,
        (_, FailureOccurred(cause)) => Some(Failed {
            cause: cause.clone(),
        }),
        (Created, FeaturesDone) => Some(FeaturesExtracted),
        (FeaturesExtracted, SeedTrainDone) => Some(SeedTrained),
        (SeedTrained, BatchOpened) | (Retrained, BatchOpened) => Some(AwaitingCrowd),
        (AwaitingCrowd, BatchComplete) => Some(ConsensusReady),
        (ConsensusReady, RetrainDone) => Some(Retrained),
        _ => None,
    };
    next.ok_or_else(|| Error::IllegalTransition {
        state: current.to_string(),
        event: event.name().to_string(),
    })
}
