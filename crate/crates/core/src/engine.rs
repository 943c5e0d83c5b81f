//! The active-learning loop for each job: feature extraction, seed training,
//! batch sampling, consensus, retraining and model versioning.
//!
//! All mutation of one job goes through that job's mutex; different jobs run
//! independently.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::coordination::{BatchProgress, BatchRequest, Coordinator, OpenedBatch};
use crate::error::{Error, Result};
use crate::imaging::{decode_gray, RasterFormat};
use crate::model::{job_state_transition, AnnotationType, JobSpec, JobState, Label, LoopEvent, Method, StageKind};
use crate::plugin::protocol::{
    ConsensusLabel, CrowdLabel, DoRunPayload, DoRunResult, DoTrainPayload, DoTrainResult, GetConsensusPayload,
    GetConsensusResult, GetFeatureVectorPayload, GetFeatureVectorResult, GetModelPayload, GetModelResult,
    GetNextSamplesPayload, GetNextSamplesResult, ImageConfidences,
};
use crate::plugin::{PluginDescriptor, PluginHost, PluginRegistry};
use crate::storage::{append_jsonl, ensure_dir, put_bytes_atomic, put_document_atomic, read_document, read_jsonl, DatasetManifest, Store};

/// Images per `getFeatureVector` request.
const FEATURE_CHUNK: usize = 256;
const FEATURE_FILE: &str = "features.json";

pub mod events {
    pub const JOB_CREATED: &str = "JobCreated";
    pub const FEATURES_EXTRACTED: &str = "FeaturesExtracted";
    pub const SEED_TRAINED: &str = "SeedTrained";
    pub const SAMPLE_SELECTED: &str = "SampleSelected";
    pub const ANNOTATIONS_COLLECTED: &str = "AnnotationsCollected";
    pub const CONSENSUS_FORMED: &str = "ConsensusFormed";
    pub const RETRAINED: &str = "Retrained";
    pub const FAILED: &str = "Failed";

    /// The per-iteration cycle every completed batch leaves in the log.
    pub const CYCLE: [&str; 4] = [SAMPLE_SELECTED, ANNOTATIONS_COLLECTED, CONSENSUS_FORMED, RETRAINED];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ts: DateTime<Utc>,
    pub job_id: String,
    pub event: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub job_id: String,
    pub version: u32,
    /// Artifact directory, relative to the data root.
    pub model_dir: String,
    pub trained_on: usize,
    /// Accuracy on the seed holdout; absent for non-classification jobs or an empty holdout.
    pub holdout_accuracy: Option<f64>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Seed,
    Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEntry {
    pub label: Label,
    pub source: LabelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// `state.json`: everything about a job that changes as the loop runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub state: JobState,
    pub versions: Vec<ModelVersion>,
    pub training_set: BTreeMap<String, TrainingEntry>,
    pub holdout: Vec<String>,
    pub batches: Vec<String>,
    pub current_batch: Option<String>,
    /// Versions whose artifact went missing; kept for inspection, never served.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quarantined: Vec<ModelVersion>,
}

/// Cached output of one extractor over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCache {
    pub plugin_id: String,
    pub version: String,
    pub model_dir: Option<PathBuf>,
    pub features: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPrediction {
    pub image_id: String,
    pub label: Label,
    pub confidences: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenBatchStatus {
    pub token: String,
    pub url: String,
    #[serde(flatten)]
    pub progress: BatchProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub annotation_type: AnnotationType,
    pub model_versions: Vec<u32>,
    pub versions: Vec<ModelVersion>,
    /// Holdout accuracy per version, in version order.
    pub holdout_accuracy: Vec<Option<f64>>,
    pub holdout_size: usize,
    pub training_set_size: usize,
    pub pool_remaining: usize,
    pub open_batch: Option<OpenBatchStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub label: Label,
    pub confidences: BTreeMap<String, f64>,
    pub model_version: u32,
}

#[derive(Debug, Clone)]
pub enum ClassifyInput {
    Image(Vec<u8>),
    Features(Vec<f64>),
}

#[derive(Debug)]
struct JobRuntime {
    spec: JobSpec,
    record: JobRecord,
    manifest: DatasetManifest,
    features: Option<Arc<FeatureCache>>,
}

/// Splits seeds (sorted by image id) into training and holdout ids. The holdout
/// takes `floor(n · fraction)` seeds but always leaves at least one for training.
pub fn split_holdout(seed_ids: &[String], fraction: f64) -> (Vec<String>, Vec<String>) {
    let mut ids = seed_ids.to_vec();
    ids.sort();
    let n = ids.len();
    let hold = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    let train = ids.split_off(hold);
    (train, ids)
}

fn failure_cause(e: &Error) -> String {
    format!("{}: {e}", e.code())
}

#[derive(Debug)]
pub struct Engine {
    store: Store,
    registry: Arc<PluginRegistry>,
    host: Arc<PluginHost>,
    coordinator: Arc<Coordinator>,
    clock: Arc<dyn Clock>,
    jobs: RwLock<BTreeMap<String, Arc<Mutex<JobRuntime>>>>,
}

impl Engine {
    /// Loads every persisted job.
    pub fn open(
        store: Store,
        registry: Arc<PluginRegistry>,
        host: Arc<PluginHost>,
        coordinator: Arc<Coordinator>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let engine = Self { store, registry, host, coordinator, clock, jobs: RwLock::new(BTreeMap::new()) };
        let dir = engine.store.jobs_dir();
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .flatten()
            .filter(|e| e.path().join("state.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        for id in ids {
            let spec: JobSpec = read_document(&engine.store.job_doc(&id))?;
            let mut record: JobRecord = read_document(&engine.store.job_state(&id))?;
            let (ok, missing): (Vec<_>, Vec<_>) = record
                .versions
                .drain(..)
                .partition(|v| engine.store.resolve(&v.model_dir).is_dir());
            if !missing.is_empty() {
                log::warn!("job {id}: quarantining {} versions with missing artifacts", missing.len());
                record.quarantined.extend(missing);
            }
            record.versions = ok;
            let manifest = engine.store.load_dataset(&spec.dataset_ref)?;
            engine.insert(JobRuntime { spec, record, manifest, features: None });
        }
        Ok(engine)
    }

    fn insert(&self, rt: JobRuntime) {
        let id = rt.spec.job_id.clone();
        self.jobs.write().expect("jobs").insert(id, Arc::new(Mutex::new(rt)));
    }

    fn job(&self, job_id: &str) -> Result<Arc<Mutex<JobRuntime>>> {
        self.jobs
            .read()
            .expect("jobs")
            .get(job_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("job {job_id}")))
    }

    pub fn job_ids(&self) -> Vec<String> {
        self.jobs.read().expect("jobs").keys().cloned().collect()
    }

    pub fn spec(&self, job_id: &str) -> Result<JobSpec> {
        Ok(self.job(job_id)?.lock().expect("job").spec.clone())
    }

    pub fn record(&self, job_id: &str) -> Result<JobRecord> {
        Ok(self.job(job_id)?.lock().expect("job").record.clone())
    }

    /// Persists a validated spec as a new job in state `Created`.
    pub fn create(&self, spec: JobSpec) -> Result<()> {
        if self.jobs.read().expect("jobs").contains_key(&spec.job_id) {
            return Err(Error::InvalidArgument(format!("job {} already exists", spec.job_id)));
        }
        let manifest = self.store.load_dataset(&spec.dataset_ref)?;
        let seed_ids: Vec<String> = spec.seed_labels.iter().map(|s| s.image_id.clone()).collect();
        let (train, holdout) = split_holdout(&seed_ids, spec.loop_params.holdout_fraction);
        let labels: BTreeMap<&str, &Label> =
            spec.seed_labels.iter().map(|s| (s.image_id.as_str(), &s.label)).collect();
        let record = JobRecord {
            job_id: spec.job_id.clone(),
            state: JobState::Created,
            versions: Vec::new(),
            training_set: train
                .iter()
                .map(|id| {
                    (id.clone(), TrainingEntry { label: labels[id.as_str()].clone(), source: LabelSource::Seed, confidence: None })
                })
                .collect(),
            holdout,
            batches: Vec::new(),
            current_batch: None,
            quarantined: Vec::new(),
        };
        ensure_dir(&self.store.job_dir(&spec.job_id))?;
        put_document_atomic(&self.store.job_doc(&spec.job_id), &spec)?;
        put_document_atomic(&self.store.job_state(&spec.job_id), &record)?;
        self.event(&spec.job_id, events::JOB_CREATED, serde_json::json!({ "dataset_ref": spec.dataset_ref }))?;
        self.insert(JobRuntime { spec, record, manifest, features: None });
        Ok(())
    }

    fn event(&self, job_id: &str, event: &str, detail: serde_json::Value) -> Result<()> {
        append_jsonl(
            &self.store.events(job_id),
            &EventRecord { ts: self.clock.now(), job_id: job_id.to_string(), event: event.to_string(), detail },
        )
    }

    pub fn events(&self, job_id: &str) -> Result<Vec<EventRecord>> {
        self.job(job_id)?;
        read_jsonl(&self.store.events(job_id))
    }

    fn persist(&self, rt: &JobRuntime) -> Result<()> {
        put_document_atomic(&self.store.job_state(&rt.spec.job_id), &rt.record)
    }

    fn transition(&self, rt: &mut JobRuntime, event: LoopEvent) -> Result<()> {
        rt.record.state = job_state_transition(&rt.record.state, &event)?;
        Ok(())
    }

    fn fail(&self, rt: &mut JobRuntime, error: &Error) {
        let cause = failure_cause(error);
        log::error!("job {} failed: {cause}", rt.spec.job_id);
        if let Ok(next) = job_state_transition(&rt.record.state, &LoopEvent::FailureOccurred(cause.clone())) {
            rt.record.state = next;
        }
        let _ = self.event(
            &rt.spec.job_id,
            events::FAILED,
            serde_json::json!({ "code": error.code(), "message": error.to_string() }),
        );
        if let Err(e) = self.persist(rt) {
            log::error!("job {}: cannot persist failure: {e}", rt.spec.job_id);
        }
    }

    fn plugin(&self, spec: &JobSpec, stage: StageKind) -> Result<PluginDescriptor> {
        let id = spec
            .plugin_for(stage)
            .ok_or_else(|| Error::StageMismatch(format!("no plugin mapped for {stage}")))?;
        self.registry.get(id).ok_or_else(|| Error::UnknownPlugin(id.to_string()))
    }

    fn timeout(spec: &JobSpec) -> Option<Duration> {
        spec.loop_params.invoke_timeout_secs.map(Duration::from_secs)
    }

    fn image_path(&self, rt: &JobRuntime, image_id: &str) -> Result<PathBuf> {
        self.store
            .image_path(&rt.manifest, image_id)
            .ok_or_else(|| Error::NotFound(format!("image {image_id}")))
    }

    /// Loads the extractor's cached features for the dataset, extracting them
    /// first if no cache exists.
    fn ensure_features(&self, rt: &mut JobRuntime) -> Result<Arc<FeatureCache>> {
        if let Some(f) = &rt.features {
            return Ok(f.clone());
        }
        let plugin = self.plugin(&rt.spec, StageKind::FeatureExtraction)?;
        let dir = self
            .store
            .feature_cache_dir(&rt.manifest.dataset_id, &plugin.plugin_id, &plugin.version);
        let path = dir.join(FEATURE_FILE);
        let all_ids: Vec<String> = rt.manifest.items.iter().map(|i| i.image_id.clone()).collect();
        if path.exists() {
            let cache: FeatureCache = read_document(&path)?;
            if all_ids.iter().all(|id| cache.features.contains_key(id)) {
                let cache = Arc::new(cache);
                rt.features = Some(cache.clone());
                return Ok(cache);
            }
            log::warn!("feature cache {} is incomplete; re-extracting", path.display());
        }
        let timeout = Self::timeout(&rt.spec);
        ensure_dir(&dir)?;
        let model_dir_out = dir.join("model");
        ensure_dir(&model_dir_out)?;
        let model: GetModelResult =
            self.host
                .call(&plugin, Method::GetModel, &GetModelPayload { out_model_dir: model_dir_out }, timeout)?;
        let mut features = BTreeMap::new();
        let mut dimension = None;
        for chunk in all_ids.chunks(FEATURE_CHUNK) {
            let images = chunk.iter().map(|id| self.image_path(rt, id)).collect::<Result<Vec<_>>>()?;
            let vectors: GetFeatureVectorResult = self.host.call(
                &plugin,
                Method::GetFeatureVector,
                &GetFeatureVectorPayload { images, model_dir: model.model_dir.clone() },
                timeout,
            )?;
            if vectors.len() != chunk.len() {
                return Err(Error::MalformedResponse(format!(
                    "getFeatureVector returned {} vectors for {} images",
                    vectors.len(),
                    chunk.len()
                )));
            }
            for (id, v) in chunk.iter().zip(vectors) {
                let d = *dimension.get_or_insert(v.len());
                if v.len() != d || d == 0 || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::MalformedResponse(format!("feature vector for {id} has bad shape")));
                }
                features.insert(id.clone(), v);
            }
        }
        let cache = FeatureCache {
            plugin_id: plugin.plugin_id.clone(),
            version: plugin.version.clone(),
            model_dir: model.model_dir,
            features,
        };
        put_document_atomic(&path, &cache)?;
        let cache = Arc::new(cache);
        rt.features = Some(cache.clone());
        Ok(cache)
    }

    /// Feature vector the classifier sees for an image. Comparison jobs append
    /// the reference image's features.
    fn feature_for(rt: &JobRuntime, cache: &FeatureCache, image_id: &str) -> Result<Vec<f64>> {
        let base = cache
            .features
            .get(image_id)
            .ok_or_else(|| Error::NotFound(format!("features for {image_id}")))?;
        Ok(Self::with_reference(rt, cache, base.clone()))
    }

    fn with_reference(rt: &JobRuntime, cache: &FeatureCache, mut v: Vec<f64>) -> Vec<f64> {
        if rt.spec.annotation_type == AnnotationType::ImageComparison {
            if let Some(r) = rt.manifest.reference_image.as_ref().and_then(|r| cache.features.get(r)) {
                v.extend_from_slice(r);
            }
        }
        v
    }

    /// Pool images with no training label, not held out and never batched.
    fn unlabeled_pool(&self, rt: &JobRuntime) -> Vec<String> {
        let batched: BTreeSet<String> = self
            .coordinator
            .batches_of(&rt.spec.job_id)
            .into_iter()
            .flat_map(|b| b.image_ids)
            .collect();
        let holdout: BTreeSet<&String> = rt.record.holdout.iter().collect();
        let mut pool: Vec<String> = rt
            .manifest
            .pool_ids()
            .into_iter()
            .filter(|id| !rt.record.training_set.contains_key(id) && !holdout.contains(id) && !batched.contains(id))
            .collect();
        pool.sort();
        pool
    }

    fn run_model(&self, rt: &JobRuntime, cache: &FeatureCache, model_dir: &Path, image_id: &str) -> Result<DoRunResult> {
        let plugin = self.plugin(&rt.spec, StageKind::Classifier)?;
        self.host.call(
            &plugin,
            Method::DoRun,
            &DoRunPayload {
                image: self.image_path(rt, image_id)?,
                feature_vector: Self::feature_for(rt, cache, image_id)?,
                model_dir: model_dir.to_path_buf(),
            },
            Self::timeout(&rt.spec),
        )
    }

    /// Fraction of holdout images whose predicted label equals their seed label.
    fn evaluate_holdout_rt(&self, rt: &mut JobRuntime, model_dir: &Path) -> Result<f64> {
        let cache = self.ensure_features(rt)?;
        if rt.record.holdout.is_empty() {
            return Err(Error::EmptyHoldout);
        }
        let truth: BTreeMap<&str, &Label> =
            rt.spec.seed_labels.iter().map(|s| (s.image_id.as_str(), &s.label)).collect();
        let mut correct = 0usize;
        for id in &rt.record.holdout {
            let r = self.run_model(rt, &cache, model_dir, id)?;
            if truth.get(id.as_str()) == Some(&&r.label) {
                correct += 1;
            }
        }
        Ok(correct as f64 / rt.record.holdout.len() as f64)
    }

    /// Holdout accuracy of a published version.
    pub fn evaluate_holdout(&self, job_id: &str, version: u32) -> Result<f64> {
        let handle = self.job(job_id)?;
        let mut rt = handle.lock().expect("job");
        let v = rt
            .record
            .versions
            .iter()
            .find(|v| v.version == version)
            .cloned()
            .ok_or(Error::VersionNotFound(version))?;
        let dir = self.store.resolve(&v.model_dir);
        self.evaluate_holdout_rt(&mut rt, &dir)
    }

    /// Trains on the full training set and publishes the next version.
    fn train_and_publish(&self, rt: &mut JobRuntime) -> Result<ModelVersion> {
        let cache = self.ensure_features(rt)?;
        let plugin = self.plugin(&rt.spec, StageKind::Classifier)?;
        let version = rt.record.versions.last().map_or(1, |v| v.version + 1);
        let out = self.store.model_dir(&rt.spec.job_id, version);
        if out.exists() {
            std::fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        }
        ensure_dir(&out)?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        for (id, entry) in &rt.record.training_set {
            images.push(self.image_path(rt, id)?);
            labels.push(entry.label.clone());
            vectors.push(Self::feature_for(rt, &cache, id)?);
        }
        let trained: DoTrainResult = self.host.call(
            &plugin,
            Method::DoTrain,
            &DoTrainPayload {
                images,
                image_labels: labels,
                feature_vectors: vectors,
                out_model_dir: out.clone(),
                label_schema: rt.spec.label_schema.clone(),
            },
            Self::timeout(&rt.spec),
        )?;
        if !same_dir(&trained.model_dir, &out) {
            copy_tree(&trained.model_dir, &out)?;
        }
        let holdout_accuracy = if rt.spec.annotation_type == AnnotationType::Classification && !rt.record.holdout.is_empty() {
            Some(self.evaluate_holdout_rt(rt, &out)?)
        } else {
            None
        };
        let relative = out
            .strip_prefix(self.store.root())
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| out.to_string_lossy().into_owned());
        let v = ModelVersion {
            job_id: rt.spec.job_id.clone(),
            version,
            model_dir: relative,
            trained_on: rt.record.training_set.len(),
            holdout_accuracy,
            created_at: self.clock.now(),
        };
        rt.record.versions.push(v.clone());
        Ok(v)
    }

    /// Scores every pool image with the newest version and caches the result.
    fn score_pool(&self, rt: &mut JobRuntime) -> Result<usize> {
        let cache = self.ensure_features(rt)?;
        let latest = rt.record.versions.last().cloned().ok_or(Error::VersionNotFound(0))?;
        let dir = self.store.resolve(&latest.model_dir);
        let mut out = Vec::new();
        for id in rt.manifest.pool_ids() {
            let r = self.run_model(rt, &cache, &dir, &id)?;
            out.push(PoolPrediction { image_id: id, label: r.label, confidences: r.confidences });
        }
        put_document_atomic(&self.store.predictions(&rt.spec.job_id), &out)?;
        Ok(out.len())
    }

    pub fn predictions(&self, job_id: &str) -> Result<Vec<PoolPrediction>> {
        self.job(job_id)?;
        let path = self.store.predictions(job_id);
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_document(&path)
    }

    /// Extracts features, trains on the seed labels, publishes version 1 and
    /// scores the pool. A stage failure moves the job to `Failed` and is
    /// reported through the returned state.
    pub fn bootstrap(&self, job_id: &str) -> Result<JobState> {
        let handle = self.job(job_id)?;
        let mut rt = handle.lock().expect("job");
        if !matches!(rt.record.state, JobState::Created | JobState::FeaturesExtracted) {
            return Err(Error::WrongState(rt.record.state.to_string()));
        }
        if let Err(e) = self.bootstrap_locked(&mut rt) {
            self.fail(&mut rt, &e);
        }
        Ok(rt.record.state.clone())
    }

    fn bootstrap_locked(&self, rt: &mut JobRuntime) -> Result<()> {
        if rt.record.state == JobState::Created {
            let cache = self.ensure_features(rt)?;
            self.transition(rt, LoopEvent::FeaturesDone)?;
            self.persist(rt)?;
            self.event(
                &rt.spec.job_id,
                events::FEATURES_EXTRACTED,
                serde_json::json!({ "images": cache.features.len(), "plugin_id": cache.plugin_id }),
            )?;
        }
        let v = self.train_and_publish(rt)?;
        self.transition(rt, LoopEvent::SeedTrainDone)?;
        let scored = self.score_pool(rt)?;
        self.persist(rt)?;
        self.event(
            &rt.spec.job_id,
            events::SEED_TRAINED,
            serde_json::json!({
                "version": v.version,
                "trained_on": v.trained_on,
                "holdout_accuracy": v.holdout_accuracy,
                "predictions": scored,
            }),
        )
    }

    /// Samples the next batch from the unlabeled pool and opens it for the crowd.
    pub fn request_batch(&self, job_id: &str) -> Result<OpenedBatch> {
        let handle = self.job(job_id)?;
        let mut rt = handle.lock().expect("job");
        if !matches!(rt.record.state, JobState::SeedTrained | JobState::Retrained) {
            return Err(Error::WrongState(rt.record.state.to_string()));
        }
        let pool = self.unlabeled_pool(&rt);
        if pool.is_empty() {
            return Err(Error::PoolExhausted);
        }
        let in_pool: BTreeSet<&String> = pool.iter().collect();
        let predictions: Vec<ImageConfidences> = self
            .predictions(job_id)?
            .into_iter()
            .filter(|p| in_pool.contains(&p.image_id))
            .map(|p| ImageConfidences { image_id: p.image_id, confidences: p.confidences })
            .collect();
        let sampler = self.plugin(&rt.spec, StageKind::TaskSampler)?;
        let batch_size = rt.spec.loop_params.batch_size;
        let sampled: GetNextSamplesResult = self.host.call(
            &sampler,
            Method::GetNextSamples,
            &GetNextSamplesPayload {
                images: pool.clone(),
                predictions,
                batch_size,
                seed: Some(sampler_seed(job_id, rt.spec.loop_params.sampler_seed, rt.record.batches.len())),
            },
            Self::timeout(&rt.spec),
        )?;
        let ids = sampled.images;
        if ids.is_empty() {
            return Err(Error::SamplerContractViolation("sampler returned no images".into()));
        }
        if ids.len() > batch_size {
            return Err(Error::SamplerContractViolation(format!(
                "sampler returned {} images for batch size {batch_size}",
                ids.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !in_pool.contains(id) {
                return Err(Error::SamplerContractViolation(format!("`{id}` is not in the unlabeled pool")));
            }
            if !seen.insert(id) {
                return Err(Error::SamplerContractViolation(format!("`{id}` returned twice")));
            }
        }
        let opened = self.coordinator.open_batch(BatchRequest {
            job_id: job_id.to_string(),
            dataset_ref: rt.spec.dataset_ref.clone(),
            image_ids: ids,
            crowd_mode: rt.spec.crowd_mode,
            annotation_type: rt.spec.annotation_type,
            label_schema: rt.spec.label_schema.clone(),
            redundancy_k: rt.spec.loop_params.redundancy_k,
            reference_image: if rt.spec.annotation_type == AnnotationType::ImageComparison {
                rt.manifest.reference_image.clone()
            } else {
                None
            },
        })?;
        self.transition(&mut rt, LoopEvent::BatchOpened)?;
        rt.record.batches.push(opened.batch.batch_id.clone());
        rt.record.current_batch = Some(opened.batch.batch_id.clone());
        self.persist(&rt)?;
        self.event(
            job_id,
            events::SAMPLE_SELECTED,
            serde_json::json!({
                "batch_id": opened.batch.batch_id,
                "images": opened.batch.image_ids,
                "sampler": sampler.plugin_id,
            }),
        )?;
        Ok(opened)
    }

    /// Forms consensus for a complete batch, merges it into the training set
    /// and retrains. Returns `None` when the batch does not yet meet the
    /// redundancy threshold or was already processed.
    pub fn on_batch_complete(&self, job_id: &str, batch_id: &str) -> Result<Option<ModelVersion>> {
        let handle = self.job(job_id)?;
        let mut rt = handle.lock().expect("job");
        if rt.record.current_batch.as_deref() != Some(batch_id) {
            if rt.record.batches.iter().any(|b| b == batch_id) {
                return Ok(None);
            }
            return Err(Error::NotFound(format!("batch {batch_id} of job {job_id}")));
        }
        match rt.record.state {
            JobState::AwaitingCrowd => {}
            JobState::ConsensusReady => return self.finish_retrain(&mut rt).map(Some),
            _ => return Err(Error::WrongState(rt.record.state.to_string())),
        }
        let progress = self.coordinator.progress(batch_id)?;
        if progress.counts.values().any(|&c| c < progress.redundancy_k) {
            return Ok(None);
        }
        if let Err(e) = self.form_consensus(&mut rt, batch_id) {
            self.fail(&mut rt, &e);
            return Err(e);
        }
        self.finish_retrain(&mut rt).map(Some)
    }

    fn form_consensus(&self, rt: &mut JobRuntime, batch_id: &str) -> Result<()> {
        let batch = self.coordinator.batch(batch_id)?;
        let annotations = self.coordinator.annotations(batch_id)?;
        self.event(
            &rt.spec.job_id,
            events::ANNOTATIONS_COLLECTED,
            serde_json::json!({
                "batch_id": batch_id,
                "annotations": annotations.len(),
                "workers": annotations.iter().map(|a| &a.worker_id).collect::<BTreeSet<_>>().len(),
            }),
        )?;
        let plugin = self.plugin(&rt.spec, StageKind::Consensus)?;
        let result: GetConsensusResult = self.host.call(
            &plugin,
            Method::GetConsensus,
            &GetConsensusPayload {
                images: batch.image_ids.clone(),
                crowd_labels: annotations
                    .iter()
                    .map(|a| CrowdLabel { image_id: a.image_id.clone(), worker_id: a.worker_id.clone(), label: a.label.clone() })
                    .collect(),
                label_schema: rt.spec.label_schema.clone(),
            },
            Self::timeout(&rt.spec),
        )?;
        let merged = check_consensus(&batch.image_ids, result.consensus_labels, rt.spec.annotation_type, &rt.spec.label_schema)?;
        let mean_confidence = merged.iter().map(|c| c.confidence).sum::<f64>() / merged.len() as f64;
        for c in &merged {
            rt.record.training_set.insert(
                c.image_id.clone(),
                TrainingEntry { label: c.label.clone(), source: LabelSource::Consensus, confidence: Some(c.confidence) },
            );
        }
        self.transition(rt, LoopEvent::BatchComplete)?;
        self.persist(rt)?;
        self.event(
            &rt.spec.job_id,
            events::CONSENSUS_FORMED,
            serde_json::json!({
                "batch_id": batch_id,
                "labels": merged.len(),
                "mean_confidence": mean_confidence,
                "consensus": plugin.plugin_id,
            }),
        )
    }

    fn finish_retrain(&self, rt: &mut JobRuntime) -> Result<ModelVersion> {
        let run = |rt: &mut JobRuntime| -> Result<ModelVersion> {
            let v = self.train_and_publish(rt)?;
            self.transition(rt, LoopEvent::RetrainDone)?;
            rt.record.current_batch = None;
            let scored = self.score_pool(rt)?;
            self.persist(rt)?;
            self.event(
                &rt.spec.job_id,
                events::RETRAINED,
                serde_json::json!({
                    "version": v.version,
                    "trained_on": v.trained_on,
                    "holdout_accuracy": v.holdout_accuracy,
                    "predictions": scored,
                }),
            )?;
            Ok(v)
        };
        run(rt).inspect_err(|e| self.fail(rt, e))
    }

    /// Continues work interrupted by a restart: unfinished bootstraps, batches
    /// that completed without retraining, and consensus that was never retrained on.
    pub fn resume(&self, job_id: &str) -> Result<()> {
        let state = self.record(job_id)?.state;
        match state {
            JobState::Created | JobState::FeaturesExtracted => {
                self.bootstrap(job_id)?;
            }
            JobState::AwaitingCrowd | JobState::ConsensusReady => {
                if let Some(b) = self.record(job_id)?.current_batch {
                    self.on_batch_complete(job_id, &b)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatus> {
        let handle = self.job(job_id)?;
        let rt = handle.lock().expect("job");
        let open_batch = match &rt.record.current_batch {
            Some(b) if rt.record.state == JobState::AwaitingCrowd => {
                let batch = self.coordinator.batch(b)?;
                Some(OpenBatchStatus {
                    url: self.coordinator.work_url(&batch.token),
                    token: batch.token,
                    progress: self.coordinator.progress(b)?,
                })
            }
            _ => None,
        };
        Ok(JobStatus {
            job_id: job_id.to_string(),
            state: rt.record.state.clone(),
            annotation_type: rt.spec.annotation_type,
            model_versions: rt.record.versions.iter().map(|v| v.version).collect(),
            holdout_accuracy: rt.record.versions.iter().map(|v| v.holdout_accuracy).collect(),
            versions: rt.record.versions.clone(),
            holdout_size: rt.record.holdout.len(),
            training_set_size: rt.record.training_set.len(),
            pool_remaining: self.unlabeled_pool(&rt).len(),
            open_batch,
        })
    }

    /// Runs a published version on one image or feature vector. Older versions
    /// stay servable after retraining.
    pub fn classify(&self, job_id: &str, version: u32, input: ClassifyInput) -> Result<ClassifyResult> {
        let handle = self.job(job_id)?;
        let (spec, model_dir, cache, reference) = {
            let mut rt = handle.lock().expect("job");
            let v = rt
                .record
                .versions
                .iter()
                .find(|v| v.version == version)
                .cloned()
                .ok_or(Error::VersionNotFound(version))?;
            let cache = self.ensure_features(&mut rt)?;
            let reference = rt.manifest.reference_image.clone();
            (rt.spec.clone(), self.store.resolve(&v.model_dir), cache, reference)
        };
        let scratch = self.store.scratch_dir().join(format!("classify-{}", uuid::Uuid::new_v4().simple()));
        let result = (|| -> Result<ClassifyResult> {
            let (image, mut feature) = match input {
                ClassifyInput::Features(f) => (scratch.join("input"), f),
                ClassifyInput::Image(bytes) => {
                    let format = RasterFormat::sniff(&bytes)
                        .ok_or_else(|| Error::UndecodableImage("unsupported image format".into()))?;
                    decode_gray(&bytes).map_err(|e| Error::UndecodableImage(e.to_string()))?;
                    ensure_dir(&scratch)?;
                    let path = scratch.join(format!("input.{}", format.extension()));
                    put_bytes_atomic(&path, &bytes)?;
                    let extractor = self.plugin(&spec, StageKind::FeatureExtraction)?;
                    let mut vectors: GetFeatureVectorResult = self.host.call(
                        &extractor,
                        Method::GetFeatureVector,
                        &GetFeatureVectorPayload { images: vec![path.clone()], model_dir: cache.model_dir.clone() },
                        Self::timeout(&spec),
                    )?;
                    if vectors.len() != 1 {
                        return Err(Error::MalformedResponse(format!(
                            "getFeatureVector returned {} vectors for 1 image",
                            vectors.len()
                        )));
                    }
                    (path, vectors.remove(0))
                }
            };
            if spec.annotation_type == AnnotationType::ImageComparison {
                if let Some(r) = reference.as_ref().and_then(|r| cache.features.get(r)) {
                    feature.extend_from_slice(r);
                }
            }
            let classifier = self.plugin(&spec, StageKind::Classifier)?;
            let r: DoRunResult = self.host.call(
                &classifier,
                Method::DoRun,
                &DoRunPayload { image, feature_vector: feature, model_dir },
                Self::timeout(&spec),
            )?;
            Ok(ClassifyResult { label: r.label, confidences: r.confidences, model_version: version })
        })();
        let _ = std::fs::remove_dir_all(&scratch);
        result
    }
}

/// Checks a consensus response against the batch: exactly one valid label per
/// batch image, nothing else.
fn check_consensus(
    batch_images: &[String],
    labels: Vec<ConsensusLabel>,
    annotation_type: AnnotationType,
    schema: &[String],
) -> Result<Vec<ConsensusLabel>> {
    let wanted: BTreeSet<&String> = batch_images.iter().collect();
    let mut seen = BTreeSet::new();
    for c in &labels {
        if !wanted.contains(&c.image_id) {
            return Err(Error::ConsensusContractViolation(format!("`{}` is not in the batch", c.image_id)));
        }
        if !seen.insert(c.image_id.clone()) {
            return Err(Error::ConsensusContractViolation(format!("`{}` labeled twice", c.image_id)));
        }
        c.label
            .validate(annotation_type, schema)
            .map_err(|e| Error::ConsensusContractViolation(format!("`{}`: {e}", c.image_id)))?;
    }
    if let Some(missing) = batch_images.iter().find(|i| !seen.contains(*i)) {
        return Err(Error::ConsensusContractViolation(format!("no label for `{missing}`")));
    }
    Ok(labels)
}

fn sampler_seed(job_id: &str, fixed: Option<u64>, batch_index: usize) -> u64 {
    let key = match fixed {
        Some(seed) => format!("#{seed}:{batch_index}"),
        None => format!("{job_id}:{batch_index}"),
    };
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.map_err(|e| Error::io(from, e.into()))?;
        let rel = entry.path().strip_prefix(from).unwrap_or(entry.path());
        let target = to.join(rel);
        if entry.file_type().is_dir() {
            ensure_dir(&target)?;
        } else {
            std::fs::copy(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
        }
    }
    Ok(())
}
