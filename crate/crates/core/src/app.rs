//! Service facade over storage, the plugin registry, the loop engine and crowd
//! coordination. The HTTP layer and the CLI drive everything through [`App`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::coordination::{Coordinator, MockPlatformClient, PlatformClient, PostingOutcome, SessionStart, SubmitOutcome};
use crate::engine::{ClassifyInput, ClassifyResult, Engine, EventRecord, JobStatus};
use crate::error::{Error, Result};
use crate::model::{validate_job_spec, JobSpec, Label};
use crate::plugin::{
    conformance_check, ConformanceReport, PluginDescriptor, PluginHost, PluginRegistry, Reviewer, Verdict,
};
use crate::storage::{ensure_dir, put_bytes_atomic, Store};

pub const DEFAULT_INVOKE_TIMEOUT: Duration = Duration::from_secs(60);

pub struct AppConfig {
    pub data_dir: PathBuf,
    pub admin_token: Option<String>,
    pub invoke_timeout: Duration,
    pub clock: Arc<dyn Clock>,
    /// Marketplace clients by profile name. Profiles without a client share one mock.
    pub clients: BTreeMap<String, Arc<dyn PlatformClient>>,
}

impl AppConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            admin_token: None,
            invoke_timeout: DEFAULT_INVOKE_TIMEOUT,
            clock: Arc::new(SystemClock),
            clients: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub job_id: String,
    pub batch_id: String,
    pub token: String,
    pub url: String,
    pub batch_size: usize,
    pub image_ids: Vec<String>,
    pub redundancy_k: usize,
    pub postings: Vec<PostingOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    #[serde(flatten)]
    pub outcome: SubmitOutcome,
    /// Version published by the retrain this submission triggered.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishResponse {
    pub session_id: String,
    pub survey_code: String,
}

#[derive(Debug)]
pub struct App {
    store: Store,
    registry: Arc<PluginRegistry>,
    host: Arc<PluginHost>,
    coordinator: Arc<Coordinator>,
    engine: Engine,
    admin_token: Option<String>,
}

impl App {
    /// Opens the data directory and resumes any work a previous process left unfinished.
    pub fn open(config: AppConfig) -> Result<Self> {
        let store = Store::open(&config.data_dir)?;
        let registry = Arc::new(PluginRegistry::open(store.plugins_dir())?);
        let host = Arc::new(PluginHost::new(store.scratch_dir(), config.invoke_timeout));
        let mut clients = config.clients;
        let mock: Arc<dyn PlatformClient> = Arc::new(MockPlatformClient::default());
        for p in crate::coordination::load_profiles(&store.root().join(crate::coordination::PLATFORMS_FILE))? {
            clients.entry(p.name).or_insert_with(|| mock.clone());
        }
        let coordinator = Arc::new(Coordinator::open(store.clone(), config.clock.clone(), clients)?);
        let engine = Engine::open(store.clone(), registry.clone(), host.clone(), coordinator.clone(), config.clock)?;
        let app = Self { store, registry, host, coordinator, engine, admin_token: config.admin_token };
        for job in app.engine.job_ids() {
            if let Err(e) = app.engine.resume(&job) {
                log::warn!("job {job}: resume failed: {e}");
            }
        }
        Ok(app)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn registry(&self) -> &PluginRegistry {
        &self.registry
    }

    pub fn host(&self) -> &PluginHost {
        &self.host
    }

    pub fn set_base_url(&self, base: impl Into<String>) {
        self.coordinator.set_base_url(base);
    }

    /// Checks a bearer token against the admin token. With no admin token
    /// configured every caller is admin.
    pub fn is_admin(&self, bearer: Option<&str>) -> bool {
        match &self.admin_token {
            None => true,
            Some(t) => bearer == Some(t.as_str()),
        }
    }

    pub fn require_admin(&self, bearer: Option<&str>) -> Result<()> {
        if self.is_admin(bearer) {
            Ok(())
        } else {
            Err(Error::Forbidden("admin token required".into()))
        }
    }

    /// Ingests the dataset at `source` (directory or ZIP), validates the spec
    /// against it and bootstraps the job. Seed labels may name images by content
    /// id or by their file name inside the source.
    pub fn create_job(&self, mut spec: JobSpec, source: &Path, owner: Option<&str>) -> Result<JobStatus> {
        let report = self.store.ingest_dataset(source)?;
        spec.dataset_ref = report.dataset_ref.clone();
        for seed in &mut spec.seed_labels {
            if let Some(id) = report.names.get(&seed.image_id) {
                seed.image_id = id.clone();
            }
        }
        let registry = &self.registry;
        let mut spec = validate_job_spec(
            spec,
            |id| registry.get(id).filter(|p| p.visible_to(owner)),
            &report.manifest,
        )?;
        spec.job_id = format!("j-{}", uuid::Uuid::new_v4().simple());
        let job_id = spec.job_id.clone();
        self.engine.create(spec)?;
        self.engine.bootstrap(&job_id)?;
        self.engine.status(&job_id)
    }

    /// Same as [`App::create_job`] with the dataset given as ZIP bytes.
    pub fn create_job_from_archive(&self, spec: JobSpec, archive: &[u8], owner: Option<&str>) -> Result<JobStatus> {
        let dir = self.store.scratch_dir().join(format!("upload-{}", uuid::Uuid::new_v4().simple()));
        ensure_dir(&dir)?;
        let path = dir.join("dataset.zip");
        put_bytes_atomic(&path, archive)?;
        let result = self.create_job(spec, &path, owner);
        let _ = std::fs::remove_dir_all(&dir);
        result
    }

    pub fn job_status(&self, job_id: &str) -> Result<JobStatus> {
        self.engine.status(job_id)
    }

    pub fn job_events(&self, job_id: &str) -> Result<Vec<EventRecord>> {
        self.engine.events(job_id)
    }

    pub fn request_batch(&self, job_id: &str) -> Result<BatchSummary> {
        let opened = self.engine.request_batch(job_id)?;
        Ok(BatchSummary {
            job_id: job_id.to_string(),
            batch_id: opened.batch.batch_id.clone(),
            token: opened.batch.token.clone(),
            url: opened.url,
            batch_size: opened.batch.image_ids.len(),
            image_ids: opened.batch.image_ids,
            redundancy_k: opened.batch.redundancy_k,
            postings: opened.postings,
        })
    }

    pub fn work_next(&self, token: &str, worker: &str, platform: &str) -> Result<SessionStart> {
        self.coordinator.start_session(token, worker, platform)
    }

    /// Records an annotation. The submission that completes a batch also runs
    /// consensus and retraining before returning.
    pub fn submit(&self, token: &str, session_id: &str, image_id: &str, label: Label) -> Result<SubmitResponse> {
        let outcome = self.coordinator.submit(token, session_id, image_id, label)?;
        let mut model_version = None;
        if outcome.completed_now {
            let batch = self.coordinator.batch_by_token(token)?;
            match self.engine.on_batch_complete(&batch.job_id, &batch.batch_id) {
                Ok(v) => model_version = v.map(|v| v.version),
                Err(e) => log::error!("job {}: retrain after batch {} failed: {e}", batch.job_id, batch.batch_id),
            }
        }
        Ok(SubmitResponse { outcome, model_version })
    }

    pub fn finish(&self, token: &str, session_id: &str) -> Result<FinishResponse> {
        let survey_code = self.coordinator.finish(token, session_id)?;
        Ok(FinishResponse { session_id: session_id.to_string(), survey_code })
    }

    pub fn image_file(&self, token: &str, image_id: &str) -> Result<PathBuf> {
        self.coordinator.image_file(token, image_id)
    }

    pub fn classify(&self, job_id: &str, version: u32, input: ClassifyInput) -> Result<ClassifyResult> {
        self.engine.classify(job_id, version, input)
    }

    pub fn list_plugins(&self, viewer: Option<&str>, admin: bool) -> Vec<PluginDescriptor> {
        self.registry
            .list()
            .into_iter()
            .filter(|p| admin || p.visible_to(viewer))
            .collect()
    }

    pub fn add_plugin(&self, archive: &[u8], owner: &str, public: bool) -> Result<PluginDescriptor> {
        self.registry.register_archive(archive, owner, public)
    }

    pub fn approve_plugin(&self, plugin_id: &str, reviewer: &Reviewer, verdict: Verdict) -> Result<PluginDescriptor> {
        self.registry.approve(plugin_id, reviewer, verdict)
    }

    /// Runs the conformance fixture against a plugin and stores the report on it.
    pub fn check_plugin(&self, plugin_id: &str, timeout: Option<Duration>) -> Result<ConformanceReport> {
        let plugin = self
            .registry
            .get(plugin_id)
            .ok_or_else(|| Error::NotFound(format!("plugin {plugin_id}")))?;
        let report = conformance_check(&self.host, &plugin, timeout)?;
        self.registry.attach_conformance(plugin_id, report.clone())?;
        Ok(report)
    }
}
