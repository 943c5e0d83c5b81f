//! The builtin stages exposed through the plugin protocol. They are served
//! in-process by the host but speak exactly the same request/response documents
//! as external plugins, and can be run as a subprocess via `run_from_files`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock, Mutex};
use std::time::SystemTime;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::consensus::{consensus_dawid_skene, consensus_majority, DawidSkeneParams, Observation};
use super::features::{extract_histogram_features, FeatureVector};
use super::logistic::{predict_logistic, train_logistic, LogisticModel, LogisticParams};
use super::one_class::{score_one_class, train_one_class_centroid, OneClassModel};
use super::sampling::{sample_next, SamplingStrategy};
use super::Prediction;
use crate::error::{Error, Result};
use crate::imaging::load_gray;
use crate::model::{AnnotationType, Label, Method, StageKind};
use crate::plugin::protocol::{
    ConsensusLabel, DoRunPayload, DoRunResult, DoTrainPayload, DoTrainResult, GetConsensusPayload,
    GetConsensusResult, GetFeatureVectorPayload, GetFeatureVectorResult, GetModelPayload, GetModelResult,
    GetNextSamplesPayload, GetNextSamplesResult, StageRequest, StageResponse,
};
use crate::plugin::{Approval, PluginDescriptor, PluginStage, Visibility};
use crate::storage::{ensure_dir, put_document_atomic, read_document};

pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltinStage {
    Histogram,
    Logistic,
    OneClass,
    LeastConfidence,
    Margin,
    Entropy,
    Random,
    Majority,
    DawidSkene,
}

impl BuiltinStage {
    pub const ALL: [BuiltinStage; 9] = [
        BuiltinStage::Histogram,
        BuiltinStage::Logistic,
        BuiltinStage::OneClass,
        BuiltinStage::LeastConfidence,
        BuiltinStage::Margin,
        BuiltinStage::Entropy,
        BuiltinStage::Random,
        BuiltinStage::Majority,
        BuiltinStage::DawidSkene,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BuiltinStage::Histogram => "builtin-histogram",
            BuiltinStage::Logistic => "builtin-logistic",
            BuiltinStage::OneClass => "builtin-one-class",
            BuiltinStage::LeastConfidence => "builtin-least-confidence",
            BuiltinStage::Margin => "builtin-margin",
            BuiltinStage::Entropy => "builtin-entropy",
            BuiltinStage::Random => "builtin-random",
            BuiltinStage::Majority => "builtin-majority",
            BuiltinStage::DawidSkene => "builtin-dawid-skene",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.id() == id)
    }

    pub fn stage(self) -> StageKind {
        match self {
            BuiltinStage::Histogram => StageKind::FeatureExtraction,
            BuiltinStage::Logistic | BuiltinStage::OneClass => StageKind::Classifier,
            BuiltinStage::LeastConfidence
            | BuiltinStage::Margin
            | BuiltinStage::Entropy
            | BuiltinStage::Random => StageKind::TaskSampler,
            BuiltinStage::Majority | BuiltinStage::DawidSkene => StageKind::Consensus,
        }
    }

    fn name(self) -> &'static str {
        &self.id()["builtin-".len()..]
    }
}

pub fn descriptors() -> Vec<PluginDescriptor> {
    BuiltinStage::ALL
        .into_iter()
        .map(|b| PluginDescriptor {
            plugin_id: b.id().to_string(),
            name: b.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stage_kind: PluginStage::Builtin(b.stage()),
            visibility: Visibility::Public,
            approval: Approval::Approved { by: "system".into() },
            entry_command: vec!["ashwin".into(), "stage-exec".into(), b.id().into()],
            archive_path: None,
            conformance: None,
        })
        .collect()
}

/// Contents of `model.json` written by the builtin classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArtifact {
    Logistic {
        annotation_type: AnnotationType,
        #[serde(flatten)]
        model: LogisticModel,
    },
    OneClassCentroid {
        annotation_type: AnnotationType,
        schema: Vec<String>,
        dimension: usize,
        centroid: Vec<f64>,
        sigma: f64,
    },
}

impl ModelArtifact {
    pub fn schema(&self) -> &[String] {
        match self {
            ModelArtifact::Logistic { model, .. } => &model.schema,
            ModelArtifact::OneClassCentroid { schema, .. } => schema,
        }
    }

    pub fn annotation_type(&self) -> AnnotationType {
        match self {
            ModelArtifact::Logistic { annotation_type, .. }
            | ModelArtifact::OneClassCentroid { annotation_type, .. } => *annotation_type,
        }
    }

    pub fn predict(&self, image_id: &str, feature: &[f64]) -> Result<Prediction> {
        match self {
            ModelArtifact::Logistic { model, .. } => predict_logistic(image_id, feature, model),
            ModelArtifact::OneClassCentroid { schema, centroid, sigma, .. } => {
                let model = OneClassModel { centroid: centroid.clone(), sigma: *sigma };
                let s = score_one_class(feature, &model)?;
                Ok(Prediction::from_schema(image_id, schema, &one_class_probabilities(s, schema.len())))
            }
        }
    }

    pub fn one_class(&self) -> Option<OneClassModel> {
        match self {
            ModelArtifact::OneClassCentroid { centroid, sigma, .. } => {
                Some(OneClassModel { centroid: centroid.clone(), sigma: *sigma })
            }
            _ => None,
        }
    }
}

/// The positive class gets the score; the rest share the remainder evenly.
fn one_class_probabilities(score: f64, classes: usize) -> Vec<f64> {
    if classes <= 1 {
        return vec![1.0; classes];
    }
    let rest = (1.0 - score) / (classes - 1) as f64;
    std::iter::once(score).chain(std::iter::repeat_n(rest, classes - 1)).collect()
}

type CacheKey = (PathBuf, Option<SystemTime>, u64);

static MODEL_CACHE: LazyLock<Mutex<HashMap<CacheKey, Arc<ModelArtifact>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

const MODEL_CACHE_LIMIT: usize = 256;

/// Loads `model_dir/model.json`, memoized on (path, mtime, length).
pub fn load_model(model_dir: &Path) -> Result<Arc<ModelArtifact>> {
    let path = model_dir.join(MODEL_FILE);
    let meta = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
    let key = (path.clone(), meta.modified().ok(), meta.len());
    if let Some(hit) = MODEL_CACHE.lock().expect("model cache").get(&key) {
        return Ok(hit.clone());
    }
    let artifact: Arc<ModelArtifact> = Arc::new(read_document(&path)?);
    let mut cache = MODEL_CACHE.lock().expect("model cache");
    if cache.len() >= MODEL_CACHE_LIMIT {
        cache.clear();
    }
    cache.insert(key, artifact.clone());
    Ok(artifact)
}

/// Serves one request. Failures become an `error` response whose message starts
/// with the error code.
pub fn handle(stage: BuiltinStage, request: &StageRequest) -> StageResponse {
    match dispatch(stage, request) {
        Ok(r) => r,
        Err(e) => StageResponse::error(format!("{}: {e}", e.code())),
    }
}

/// Reads a request document, serves it and writes the response document.
pub fn run_from_files(stage: BuiltinStage, request_path: &Path, response_path: &Path) -> Result<()> {
    let request: StageRequest = read_document(request_path)?;
    put_document_atomic(response_path, &handle(stage, &request))
}

fn payload<T: DeserializeOwned>(request: &StageRequest) -> Result<T> {
    serde_json::from_value(request.payload.clone())
        .map_err(|e| Error::InvalidArgument(format!("{} payload: {e}", request.method)))
}

fn dispatch(stage: BuiltinStage, request: &StageRequest) -> Result<StageResponse> {
    if request.method.stage() != stage.stage() {
        return Err(Error::MethodStageMismatch {
            method: request.method.to_string(),
            stage: stage.stage().to_string(),
        });
    }
    match (stage, request.method) {
        (BuiltinStage::Histogram, Method::GetModel) => {
            let _: GetModelPayload = payload(request)?;
            StageResponse::ok(&GetModelResult { model_dir: None })
        }
        (BuiltinStage::Histogram, Method::GetFeatureVector) => {
            let p: GetFeatureVectorPayload = payload(request)?;
            StageResponse::ok(&histogram_features(&p.images)?)
        }
        (BuiltinStage::Logistic | BuiltinStage::OneClass, Method::DoTrain) => {
            StageResponse::ok(&train(stage, &payload(request)?)?)
        }
        (BuiltinStage::Logistic | BuiltinStage::OneClass, Method::DoRun) => {
            StageResponse::ok(&run(&payload(request)?)?)
        }
        (_, Method::GetNextSamples) => StageResponse::ok(&next_samples(stage, &payload(request)?)?),
        (_, Method::GetConsensus) => StageResponse::ok(&consensus(stage, &payload(request)?)?),
        _ => unreachable!("method stage checked above"),
    }
}

pub fn histogram_features(images: &[PathBuf]) -> Result<GetFeatureVectorResult> {
    images
        .iter()
        .map(|path| Ok(extract_histogram_features(&load_gray(path)?)?.0))
        .collect()
}

fn class_keys(labels: &[Label]) -> Result<(AnnotationType, Vec<String>)> {
    let annotation_type = labels.first().map_or(AnnotationType::Classification, Label::annotation_type);
    let keys = labels
        .iter()
        .map(|l| {
            if l.annotation_type() != annotation_type {
                return Err(Error::WrongLabelType("mixed label variants".into()));
            }
            l.class_key()
                .ok_or_else(|| Error::WrongLabelType(format!("{:?} labels have no class", l.annotation_type())))
        })
        .collect::<Result<_>>()?;
    Ok((annotation_type, keys))
}

fn schema_or_observed(schema: &[String], keys: &[String]) -> Vec<String> {
    if schema.is_empty() {
        keys.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        schema.to_vec()
    }
}

fn train(stage: BuiltinStage, p: &DoTrainPayload) -> Result<DoTrainResult> {
    let (annotation_type, keys) = class_keys(&p.image_labels)?;
    let schema = schema_or_observed(&p.label_schema, &keys);
    let features: Vec<FeatureVector> = p.feature_vectors.iter().cloned().map(FeatureVector).collect();
    let artifact = match stage {
        BuiltinStage::Logistic => ModelArtifact::Logistic {
            annotation_type,
            model: train_logistic(&features, &keys, &schema, &LogisticParams::default())?,
        },
        _ => {
            if features.len() != keys.len() {
                return Err(Error::DimensionMismatch { expected: features.len(), actual: keys.len() });
            }
            if let Some(bad) = keys.iter().find(|k| !schema.contains(k)) {
                return Err(Error::UnknownLabel(bad.clone()));
            }
            let positive = schema.first().ok_or(Error::EmptyTrainingSet)?;
            let chosen: Vec<FeatureVector> = features
                .iter()
                .zip(&keys)
                .filter(|(_, k)| *k == positive)
                .map(|(f, _)| f.clone())
                .collect();
            let model = train_one_class_centroid(&chosen)?;
            ModelArtifact::OneClassCentroid {
                annotation_type,
                schema,
                dimension: model.dimension(),
                centroid: model.centroid,
                sigma: model.sigma,
            }
        }
    };
    ensure_dir(&p.out_model_dir)?;
    put_document_atomic(&p.out_model_dir.join(MODEL_FILE), &artifact)?;
    Ok(DoTrainResult { model_dir: p.out_model_dir.clone() })
}

fn run(p: &DoRunPayload) -> Result<DoRunResult> {
    let model = load_model(&p.model_dir)?;
    let id = p.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let prediction = model.predict(&id, &p.feature_vector)?;
    Ok(DoRunResult {
        label: Label::from_class_key(&prediction.predicted, model.annotation_type())?,
        confidences: prediction.confidences,
    })
}

fn next_samples(stage: BuiltinStage, p: &GetNextSamplesPayload) -> Result<GetNextSamplesResult> {
    let strategy = match stage {
        BuiltinStage::LeastConfidence => SamplingStrategy::LeastConfidence,
        BuiltinStage::Margin => SamplingStrategy::Margin,
        BuiltinStage::Entropy => SamplingStrategy::Entropy,
        _ => SamplingStrategy::Random { seed: p.seed.unwrap_or(0) },
    };
    let known: BTreeMap<&str, &BTreeMap<String, f64>> =
        p.predictions.iter().map(|c| (c.image_id.as_str(), &c.confidences)).collect();
    let pool: Vec<(String, BTreeMap<String, f64>)> = p
        .images
        .iter()
        .map(|id| (id.clone(), known.get(id.as_str()).map(|c| (*c).clone()).unwrap_or_default()))
        .collect();
    Ok(GetNextSamplesResult { images: sample_next(strategy, &pool, p.batch_size)? })
}

fn consensus(stage: BuiltinStage, p: &GetConsensusPayload) -> Result<GetConsensusResult> {
    let labels: Vec<Label> = p.crowd_labels.iter().map(|c| c.label.clone()).collect();
    let (annotation_type, keys) = class_keys(&labels)?;
    if !p.label_schema.is_empty() {
        if let Some(bad) = keys.iter().find(|k| !p.label_schema.contains(k)) {
            return Err(Error::UnknownClass(bad.clone()));
        }
    }
    let mut grouped: BTreeMap<&str, Vec<String>> = p.images.iter().map(|i| (i.as_str(), Vec::new())).collect();
    for (c, key) in p.crowd_labels.iter().zip(&keys) {
        grouped.entry(c.image_id.as_str()).or_default().push(key.clone());
    }
    if let Some((id, _)) = grouped.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::MissingAnnotations((*id).to_string()));
    }

    let results = match stage {
        BuiltinStage::Majority => {
            let input: Vec<(String, Vec<String>)> =
                grouped.into_iter().map(|(id, v)| (id.to_string(), v)).collect();
            consensus_majority(&input)?
        }
        _ => {
            let observations: Vec<Observation> = p
                .crowd_labels
                .iter()
                .zip(&keys)
                .map(|(c, key)| Observation::new(&c.image_id, &c.worker_id, key))
                .collect();
            consensus_dawid_skene(&observations, &p.label_schema, &DawidSkeneParams::default())?.results
        }
    };
    let by_id: BTreeMap<&str, _> = results.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut order: Vec<&str> = p.images.iter().map(String::as_str).collect();
    order.extend(by_id.keys().filter(|id| !p.images.iter().any(|i| i == *id)));
    let mut seen = BTreeSet::new();
    let consensus_labels = order
        .into_iter()
        .filter(|id| seen.insert(*id))
        .map(|id| {
            let r = by_id[id];
            Ok(ConsensusLabel {
                image_id: r.image_id.clone(),
                label: Label::from_class_key(&r.label, annotation_type)?,
                confidence: r.confidence,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GetConsensusResult { consensus_labels })
}
