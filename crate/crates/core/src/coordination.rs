//! Crowd coordination: batches reachable through an unguessable URL token,
//! worker sessions with per-platform time limits, annotation collection and
//! survey codes, plus postings to public crowd platforms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::model::{AnnotationType, CrowdMode, Label};
use crate::storage::{
    append_jsonl, content_id, ensure_dir, put_bytes_atomic, put_document_atomic, read_document, read_jsonl,
    Store,
};

pub const PLATFORMS_FILE: &str = "platforms.json";
const SECRET_FILE: &str = "secret.key";
pub const PRIVATE_PROFILE: &str = "private";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    pub session_limit_minutes: Option<i64>,
}

pub fn default_profiles() -> Vec<PlatformProfile> {
    vec![
        PlatformProfile { name: "crowdflower".into(), session_limit_minutes: Some(30) },
        PlatformProfile { name: "mturk".into(), session_limit_minutes: None },
        PlatformProfile { name: PRIVATE_PROFILE.into(), session_limit_minutes: None },
    ]
}

/// Reads `platforms.json`, writing the defaults first if it does not exist.
pub fn load_profiles(path: &Path) -> Result<Vec<PlatformProfile>> {
    if !path.exists() {
        put_document_atomic(path, &default_profiles())?;
    }
    read_document(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobPosting {
    pub platform: String,
    pub url: String,
    pub title: String,
    pub reward_hint: String,
}

/// Narrow interface to a crowd marketplace.
pub trait PlatformClient: Send + Sync + Debug {
    /// Publishes a job pointing at the batch URL and returns the external id.
    fn post(&self, posting: &JobPosting) -> std::result::Result<String, String>;

    fn expire_notice(&self, _receipt: &str) {}
}

/// Records every posting and answers with receipts `mock-1`, `mock-2`, ...
#[derive(Debug, Default)]
pub struct MockPlatformClient {
    counter: AtomicU64,
    posted: Mutex<Vec<JobPosting>>,
    expired: Mutex<Vec<String>>,
    failing: Mutex<BTreeSet<String>>,
}

impl MockPlatformClient {
    pub fn postings(&self) -> Vec<JobPosting> {
        self.posted.lock().expect("mock").clone()
    }

    pub fn expired(&self) -> Vec<String> {
        self.expired.lock().expect("mock").clone()
    }

    /// Makes every later post to `platform` fail.
    pub fn fail_platform(&self, platform: &str) {
        self.failing.lock().expect("mock").insert(platform.to_string());
    }
}

impl PlatformClient for MockPlatformClient {
    fn post(&self, posting: &JobPosting) -> std::result::Result<String, String> {
        if self.failing.lock().expect("mock").contains(&posting.platform) {
            return Err(format!("{} rejected the posting", posting.platform));
        }
        self.posted.lock().expect("mock").push(posting.clone());
        Ok(format!("mock-{}", self.counter.fetch_add(1, Ordering::SeqCst) + 1))
    }

    fn expire_notice(&self, receipt: &str) {
        self.expired.lock().expect("mock").push(receipt.to_string());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    Open,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostingReceipt {
    pub platform: String,
    pub external_id: String,
    pub posted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub job_id: String,
    pub image_ids: Vec<String>,
    pub token: String,
    pub crowd_mode: CrowdMode,
    /// Platform profiles the batch was posted to (public mode only).
    #[serde(default)]
    pub platforms: Vec<String>,
    pub opened_at: DateTime<Utc>,
    pub status: BatchStatus,
    #[serde(default)]
    pub completed_at: Option<DateTime<Utc>>,
    pub dataset_ref: String,
    pub annotation_type: AnnotationType,
    pub label_schema: Vec<String>,
    pub redundancy_k: usize,
    #[serde(default)]
    pub reference_image: Option<String>,
    #[serde(default)]
    pub receipts: Vec<PostingReceipt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSession {
    pub session_id: String,
    pub batch_id: String,
    pub worker_id: String,
    /// Name the worker declared, or their platform id.
    pub worker_name: String,
    pub platform: String,
    pub started_at: DateTime<Utc>,
    pub deadline: Option<DateTime<Utc>>,
    pub completed: bool,
    pub survey_code: Option<String>,
}

impl WorkerSession {
    pub fn is_expired(&self, now: DateTime<Utc>) -> bool {
        self.deadline.is_some_and(|d| now > d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerAnnotation {
    pub batch_id: String,
    pub image_id: String,
    pub worker_id: String,
    pub label: Label,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub image_id: String,
    pub image_url: String,
    pub reference_url: Option<String>,
    pub annotation_type: AnnotationType,
    pub label_schema: Vec<String>,
    /// Images this worker still has to annotate, including this one.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostingOutcome {
    pub platform: String,
    pub receipt: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenedBatch {
    pub batch: Batch,
    pub url: String,
    pub postings: Vec<PostingOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStart {
    pub session: WorkerSession,
    pub item: WorkItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub annotation: WorkerAnnotation,
    /// Next image for this worker; `None` once their portion is done.
    pub next: Option<WorkItem>,
    pub portion_done: bool,
    pub batch_complete: bool,
    /// True only for the submission that completed the batch.
    pub completed_now: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProgress {
    pub batch_id: String,
    pub status: BatchStatus,
    pub redundancy_k: usize,
    /// Distinct-worker annotation count per image.
    pub counts: BTreeMap<String, usize>,
    pub images_at_k: usize,
    pub total: usize,
}

/// Inputs to [`Coordinator::open_batch`].
#[derive(Debug, Clone)]
pub struct BatchRequest {
    pub job_id: String,
    pub dataset_ref: String,
    pub image_ids: Vec<String>,
    pub crowd_mode: CrowdMode,
    pub annotation_type: AnnotationType,
    pub label_schema: Vec<String>,
    pub redundancy_k: usize,
    pub reference_image: Option<String>,
}

#[derive(Debug)]
struct BatchInner {
    batch: Batch,
    images: BTreeMap<String, PathBuf>,
    sessions: BTreeMap<String, WorkerSession>,
    annotations: Vec<WorkerAnnotation>,
    /// image → workers that annotated it
    voters: BTreeMap<String, BTreeSet<String>>,
}

impl BatchInner {
    fn is_complete(&self) -> bool {
        let k = self.batch.redundancy_k;
        self.batch
            .image_ids
            .iter()
            .all(|i| self.voters.get(i).map_or(0, BTreeSet::len) >= k)
    }

    fn pending_for(&self, worker_id: &str) -> Vec<&String> {
        self.batch
            .image_ids
            .iter()
            .filter(|i| !self.voters.get(*i).is_some_and(|w| w.contains(worker_id)))
            .collect()
    }

    fn progress(&self) -> BatchProgress {
        let counts: BTreeMap<String, usize> = self
            .batch
            .image_ids
            .iter()
            .map(|i| (i.clone(), self.voters.get(i).map_or(0, BTreeSet::len)))
            .collect();
        BatchProgress {
            batch_id: self.batch.batch_id.clone(),
            status: self.batch.status,
            redundancy_k: self.batch.redundancy_k,
            images_at_k: counts.values().filter(|&&c| c >= self.batch.redundancy_k).count(),
            total: counts.len(),
            counts,
        }
    }
}

#[derive(Debug)]
pub struct Coordinator {
    store: Store,
    clock: Arc<dyn Clock>,
    profiles: Vec<PlatformProfile>,
    clients: BTreeMap<String, Arc<dyn PlatformClient>>,
    secret: Vec<u8>,
    base_url: RwLock<String>,
    batches: RwLock<HashMap<String, Arc<Mutex<BatchInner>>>>,
    tokens: RwLock<HashMap<String, String>>,
    sessions: RwLock<HashMap<String, String>>,
}

fn batch_doc(store: &Store, job_id: &str, batch_id: &str) -> PathBuf {
    store.batch_dir(job_id, batch_id).join("batch.json")
}

fn sessions_doc(store: &Store, job_id: &str, batch_id: &str) -> PathBuf {
    store.batch_dir(job_id, batch_id).join("sessions.json")
}

fn new_token() -> String {
    let mut bytes = [0u8; 16];
    rand::rng().fill_bytes(&mut bytes);
    data_encoding::BASE32_NOPAD.encode(&bytes).to_ascii_lowercase()
}

/// Opaque worker id derived from the platform and the declared name.
pub fn worker_id_for(platform: &str, name: &str) -> String {
    format!("w-{}", content_id(format!("{platform}\n{name}").as_bytes()))
}

/// First 8 hex digits of SHA-256 over the session id followed by the secret.
pub fn survey_code(session_id: &str, secret: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(session_id.as_bytes());
    h.update(secret);
    hex::encode(h.finalize())[..8].to_string()
}

impl Coordinator {
    /// Loads every batch under the store and replays its annotation log. Batch
    /// status is recomputed from the replayed annotations.
    pub fn open(
        store: Store,
        clock: Arc<dyn Clock>,
        clients: BTreeMap<String, Arc<dyn PlatformClient>>,
    ) -> Result<Self> {
        let profiles = load_profiles(&store.root().join(PLATFORMS_FILE))?;
        let secret_path = store.root().join(SECRET_FILE);
        let secret = match std::fs::read(&secret_path) {
            Ok(s) => s,
            Err(_) => {
                let mut bytes = [0u8; 32];
                rand::rng().fill_bytes(&mut bytes);
                let encoded = hex::encode(bytes).into_bytes();
                put_bytes_atomic(&secret_path, &encoded)?;
                encoded
            }
        };
        let coordinator = Self {
            store,
            clock,
            profiles,
            clients,
            secret,
            base_url: RwLock::new(String::new()),
            batches: RwLock::new(HashMap::new()),
            tokens: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        };
        coordinator.load_all()?;
        Ok(coordinator)
    }

    fn load_all(&self) -> Result<()> {
        let jobs = match std::fs::read_dir(self.store.jobs_dir()) {
            Ok(rd) => rd,
            Err(e) => return Err(Error::io(self.store.jobs_dir(), e)),
        };
        for job in jobs.flatten() {
            let Ok(batches) = std::fs::read_dir(job.path().join("batches")) else {
                continue;
            };
            for b in batches.flatten() {
                let doc = b.path().join("batch.json");
                if !doc.exists() {
                    continue;
                }
                let batch: Batch = read_document(&doc)?;
                self.load_batch(batch)?;
            }
        }
        Ok(())
    }

    fn load_batch(&self, mut batch: Batch) -> Result<()> {
        let job_id = batch.job_id.clone();
        let batch_id = batch.batch_id.clone();
        let annotations: Vec<WorkerAnnotation> = read_jsonl(&self.store.annotations(&job_id, &batch_id))?;
        let sessions_path = sessions_doc(&self.store, &job_id, &batch_id);
        let sessions: BTreeMap<String, WorkerSession> = if sessions_path.exists() {
            read_document(&sessions_path)?
        } else {
            BTreeMap::new()
        };
        let mut voters: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for a in &annotations {
            voters.entry(a.image_id.clone()).or_default().insert(a.worker_id.clone());
        }
        let images = self.image_paths(&batch)?;
        let mut inner = BatchInner { batch: batch.clone(), images, sessions, annotations, voters };
        let complete = inner.is_complete();
        let recorded = batch.status == BatchStatus::Complete;
        if complete != recorded {
            log::warn!(
                "batch {batch_id}: recorded status {:?} disagrees with replayed annotations; recomputed",
                batch.status
            );
            batch.status = if complete { BatchStatus::Complete } else { BatchStatus::Open };
            if complete && batch.completed_at.is_none() {
                batch.completed_at = inner.annotations.last().map(|a| a.submitted_at);
            }
            if !complete {
                batch.completed_at = None;
            }
            put_document_atomic(&batch_doc(&self.store, &job_id, &batch_id), &batch)?;
            inner.batch = batch.clone();
        }
        let ids: Vec<String> = inner.sessions.keys().cloned().collect();
        self.tokens.write().expect("tokens").insert(batch.token.clone(), batch_id.clone());
        {
            let mut s = self.sessions.write().expect("sessions");
            for id in ids {
                s.insert(id, batch_id.clone());
            }
        }
        self.batches
            .write()
            .expect("batches")
            .insert(batch_id, Arc::new(Mutex::new(inner)));
        Ok(())
    }

    fn image_paths(&self, batch: &Batch) -> Result<BTreeMap<String, PathBuf>> {
        let manifest = self.store.load_dataset(&batch.dataset_ref)?;
        let mut out = BTreeMap::new();
        for id in batch.image_ids.iter().chain(batch.reference_image.iter()) {
            let path = self
                .store
                .image_path(&manifest, id)
                .ok_or_else(|| Error::NotFound(format!("image {id}")))?;
            out.insert(id.clone(), path);
        }
        Ok(out)
    }

    pub fn profiles(&self) -> &[PlatformProfile] {
        &self.profiles
    }

    pub fn set_base_url(&self, base: impl Into<String>) {
        *self.base_url.write().expect("base url") = base.into().trim_end_matches('/').to_string();
    }

    pub fn work_url(&self, token: &str) -> String {
        format!("{}/work/{token}", self.base_url.read().expect("base url"))
    }

    fn profile(&self, name: &str) -> Result<&PlatformProfile> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownPlatform(name.to_string()))
    }

    fn by_id(&self, batch_id: &str) -> Result<Arc<Mutex<BatchInner>>> {
        self.batches
            .read()
            .expect("batches")
            .get(batch_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("batch {batch_id}")))
    }

    fn by_token(&self, token: &str) -> Result<Arc<Mutex<BatchInner>>> {
        let id = self
            .tokens
            .read()
            .expect("tokens")
            .get(&token.to_ascii_lowercase())
            .cloned()
            .ok_or(Error::UnknownToken)?;
        self.by_id(&id)
    }

    pub fn batch(&self, batch_id: &str) -> Result<Batch> {
        Ok(self.by_id(batch_id)?.lock().expect("batch").batch.clone())
    }

    pub fn batch_by_token(&self, token: &str) -> Result<Batch> {
        Ok(self.by_token(token)?.lock().expect("batch").batch.clone())
    }

    pub fn progress(&self, batch_id: &str) -> Result<BatchProgress> {
        Ok(self.by_id(batch_id)?.lock().expect("batch").progress())
    }

    pub fn annotations(&self, batch_id: &str) -> Result<Vec<WorkerAnnotation>> {
        Ok(self.by_id(batch_id)?.lock().expect("batch").annotations.clone())
    }

    pub fn session(&self, session_id: &str) -> Result<WorkerSession> {
        let batch_id = self
            .sessions
            .read()
            .expect("sessions")
            .get(session_id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))?;
        let state = self.by_id(&batch_id)?;
        let inner = state.lock().expect("batch");
        inner
            .sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))
    }

    /// Every batch of a job, oldest first.
    pub fn batches_of(&self, job_id: &str) -> Vec<Batch> {
        let mut out: Vec<Batch> = self
            .batches
            .read()
            .expect("batches")
            .values()
            .map(|b| b.lock().expect("batch").batch.clone())
            .filter(|b| b.job_id == job_id)
            .collect();
        out.sort_by(|a, b| a.opened_at.cmp(&b.opened_at).then_with(|| a.batch_id.cmp(&b.batch_id)));
        out
    }

    /// Path of a batch image (or the batch's reference image) for serving to workers.
    pub fn image_file(&self, token: &str, image_id: &str) -> Result<PathBuf> {
        let state = self.by_token(token)?;
        let inner = state.lock().expect("batch");
        inner
            .images
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::ImageNotInBatch(image_id.to_string()))
    }

    pub fn open_batch(&self, request: BatchRequest) -> Result<OpenedBatch> {
        if request.image_ids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let token = loop {
            let t = new_token();
            if !self.tokens.read().expect("tokens").contains_key(&t) {
                break t;
            }
        };
        let batch_id = format!("b-{}", uuid::Uuid::new_v4().simple());
        let platforms: Vec<String> = match request.crowd_mode {
            CrowdMode::Private => Vec::new(),
            CrowdMode::Public => self
                .profiles
                .iter()
                .filter(|p| p.name != PRIVATE_PROFILE)
                .map(|p| p.name.clone())
                .collect(),
        };
        let mut batch = Batch {
            batch_id: batch_id.clone(),
            job_id: request.job_id,
            image_ids: request.image_ids,
            token: token.clone(),
            crowd_mode: request.crowd_mode,
            platforms,
            opened_at: self.clock.now(),
            status: BatchStatus::Open,
            completed_at: None,
            dataset_ref: request.dataset_ref,
            annotation_type: request.annotation_type,
            label_schema: request.label_schema,
            redundancy_k: request.redundancy_k,
            reference_image: request.reference_image,
            receipts: Vec::new(),
        };
        let images = self.image_paths(&batch)?;
        ensure_dir(&self.store.batch_dir(&batch.job_id, &batch_id))?;
        put_document_atomic(&batch_doc(&self.store, &batch.job_id, &batch_id), &batch)?;

        let url = self.work_url(&token);
        let mut postings = Vec::new();
        for platform in batch.platforms.clone() {
            let outcome = match self.post_public_job(&platform, &url, &batch) {
                Ok(receipt) => {
                    let id = receipt.external_id.clone();
                    batch.receipts.push(receipt);
                    PostingOutcome { platform, receipt: Some(id), error: None }
                }
                Err(e) => {
                    log::warn!("batch {batch_id}: {e}");
                    PostingOutcome { platform, receipt: None, error: Some(e.to_string()) }
                }
            };
            postings.push(outcome);
        }
        if !batch.receipts.is_empty() {
            put_document_atomic(&batch_doc(&self.store, &batch.job_id, &batch_id), &batch)?;
        }

        let inner = BatchInner {
            batch: batch.clone(),
            images,
            sessions: BTreeMap::new(),
            annotations: Vec::new(),
            voters: BTreeMap::new(),
        };
        self.tokens.write().expect("tokens").insert(token, batch_id.clone());
        self.batches
            .write()
            .expect("batches")
            .insert(batch_id, Arc::new(Mutex::new(inner)));
        Ok(OpenedBatch { batch, url, postings })
    }

    /// Posts one batch to one platform through its registered client.
    pub fn post_public_job(&self, platform: &str, url: &str, batch: &Batch) -> Result<PostingReceipt> {
        self.profile(platform)?;
        let client = self.clients.get(platform).ok_or_else(|| Error::PlatformUnavailable {
            platform: platform.to_string(),
            reason: "no client registered".into(),
        })?;
        let posting = JobPosting {
            platform: platform.to_string(),
            url: url.to_string(),
            title: format!("Annotate {} images ({:?})", batch.image_ids.len(), batch.annotation_type),
            reward_hint: format!("{} annotations per image", batch.redundancy_k),
        };
        let external_id = client.post(&posting).map_err(|reason| Error::PlatformUnavailable {
            platform: platform.to_string(),
            reason,
        })?;
        Ok(PostingReceipt { platform: platform.to_string(), external_id, posted_at: self.clock.now() })
    }

    fn work_item(&self, inner: &BatchInner, image_id: &str, remaining: usize) -> WorkItem {
        let token = &inner.batch.token;
        let base = self.base_url.read().expect("base url").clone();
        WorkItem {
            image_id: image_id.to_string(),
            image_url: format!("{base}/api/work/{token}/images/{image_id}"),
            reference_url: inner
                .batch
                .reference_image
                .as_ref()
                .map(|r| format!("{base}/api/work/{token}/images/{r}")),
            annotation_type: inner.batch.annotation_type,
            label_schema: inner.batch.label_schema.clone(),
            remaining,
        }
    }

    fn persist_sessions(&self, inner: &BatchInner) -> Result<()> {
        put_document_atomic(
            &sessions_doc(&self.store, &inner.batch.job_id, &inner.batch.batch_id),
            &inner.sessions,
        )
    }

    /// Starts a session for `worker_name` on `platform`, or resumes that worker's
    /// active session, and returns the first image they have not annotated yet.
    pub fn start_session(&self, token: &str, worker_name: &str, platform: &str) -> Result<SessionStart> {
        let profile = self.profile(platform)?.clone();
        let state = self.by_token(token)?;
        let mut inner = state.lock().expect("batch");
        if inner.batch.status != BatchStatus::Open {
            return Err(Error::BatchClosed);
        }
        let worker_id = worker_id_for(platform, worker_name);
        let pending: Vec<String> = inner.pending_for(&worker_id).into_iter().cloned().collect();
        let Some(first) = pending.first() else {
            return Err(Error::NothingLeft);
        };
        let now = self.clock.now();
        let active = inner
            .sessions
            .values()
            .filter(|s| s.worker_id == worker_id && !s.completed && !s.is_expired(now))
            .max_by(|a, b| a.started_at.cmp(&b.started_at))
            .cloned();
        let session = match active {
            Some(s) => s,
            None => {
                let s = WorkerSession {
                    session_id: format!("s-{}", uuid::Uuid::new_v4().simple()),
                    batch_id: inner.batch.batch_id.clone(),
                    worker_id,
                    worker_name: worker_name.to_string(),
                    platform: profile.name.clone(),
                    started_at: now,
                    deadline: profile.session_limit_minutes.map(|m| now + Duration::minutes(m)),
                    completed: false,
                    survey_code: None,
                };
                inner.sessions.insert(s.session_id.clone(), s.clone());
                self.persist_sessions(&inner)?;
                self.sessions
                    .write()
                    .expect("sessions")
                    .insert(s.session_id.clone(), s.batch_id.clone());
                s
            }
        };
        let item = self.work_item(&inner, first, pending.len());
        Ok(SessionStart { session, item })
    }

    fn session_in<'a>(inner: &'a BatchInner, session_id: &str) -> Result<&'a WorkerSession> {
        inner
            .sessions
            .get(session_id)
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))
    }

    /// Records one annotation. The append and the completion check happen under
    /// the batch lock, so exactly one submission observes `completed_now`.
    pub fn submit(&self, token: &str, session_id: &str, image_id: &str, label: Label) -> Result<SubmitOutcome> {
        let state = self.by_token(token)?;
        let mut inner = state.lock().expect("batch");
        let now = self.clock.now();
        let session = Self::session_in(&inner, session_id)?.clone();
        if session.completed {
            return Err(Error::SessionCompleted);
        }
        if session.is_expired(now) {
            return Err(Error::SessionExpired);
        }
        if inner.batch.status != BatchStatus::Open {
            return Err(Error::BatchClosed);
        }
        if !inner.batch.image_ids.iter().any(|i| i == image_id) {
            return Err(Error::ImageNotInBatch(image_id.to_string()));
        }
        label.validate(inner.batch.annotation_type, &inner.batch.label_schema)?;
        if inner.voters.get(image_id).is_some_and(|w| w.contains(&session.worker_id)) {
            return Err(Error::DuplicateAnnotation(image_id.to_string()));
        }
        let annotation = WorkerAnnotation {
            batch_id: inner.batch.batch_id.clone(),
            image_id: image_id.to_string(),
            worker_id: session.worker_id.clone(),
            label,
            submitted_at: now,
        };
        append_jsonl(&self.store.annotations(&inner.batch.job_id, &inner.batch.batch_id), &annotation)?;
        inner.annotations.push(annotation.clone());
        inner
            .voters
            .entry(image_id.to_string())
            .or_default()
            .insert(session.worker_id.clone());

        let mut completed_now = false;
        if inner.is_complete() {
            inner.batch.status = BatchStatus::Complete;
            inner.batch.completed_at = Some(now);
            put_document_atomic(&batch_doc(&self.store, &inner.batch.job_id, &inner.batch.batch_id), &inner.batch)?;
            completed_now = true;
            for r in &inner.batch.receipts {
                if let Some(c) = self.clients.get(&r.platform) {
                    c.expire_notice(&r.external_id);
                }
            }
        }
        let pending: Vec<String> = inner.pending_for(&session.worker_id).into_iter().cloned().collect();
        let next = if inner.batch.status == BatchStatus::Open {
            pending.first().map(|i| self.work_item(&inner, i, pending.len()))
        } else {
            None
        };
        Ok(SubmitOutcome {
            annotation,
            portion_done: next.is_none(),
            next,
            batch_complete: inner.batch.status == BatchStatus::Complete,
            completed_now,
        })
    }

    /// Completes a session and returns its survey code. Finishing an already
    /// completed session returns the same code again.
    pub fn finish(&self, token: &str, session_id: &str) -> Result<String> {
        let state = self.by_token(token)?;
        let mut inner = state.lock().expect("batch");
        let session = Self::session_in(&inner, session_id)?.clone();
        if session.completed {
            return Ok(session.survey_code.unwrap_or_default());
        }
        if session.is_expired(self.clock.now()) {
            return Err(Error::SessionExpired);
        }
        if !inner.annotations.iter().any(|a| a.worker_id == session.worker_id) {
            return Err(Error::NoWorkDone);
        }
        let code = survey_code(session_id, &self.secret);
        let s = inner.sessions.get_mut(session_id).expect("checked above");
        s.completed = true;
        s.survey_code = Some(code.clone());
        self.persist_sessions(&inner)?;
        Ok(code)
    }

    /// True iff the session is completed and `code` matches its recomputed code.
    pub fn verify_survey_code(&self, session_id: &str, code: &str) -> bool {
        self.session(session_id)
            .is_ok_and(|s| s.completed && survey_code(session_id, &self.secret) == code)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::imaging::encode_png;
    use crate::storage::IngestReport;
    use image::{GrayImage, Luma};

    struct Fixture {
        _dir: tempfile::TempDir,
        store: Store,
        clock: Arc<ManualClock>,
        mock: Arc<MockPlatformClient>,
        coordinator: Coordinator,
        dataset: IngestReport,
    }

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2024-05-01T12:00:00Z").unwrap().with_timezone(&Utc)
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("data")).unwrap();
        let src = dir.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        for v in 0..4u8 {
            let img = GrayImage::from_pixel(2, 2, Luma([v * 40]));
            std::fs::write(src.join(format!("{v}.png")), encode_png(&img)).unwrap();
        }
        let dataset = store.ingest_dataset(&src).unwrap();
        let clock = Arc::new(ManualClock::new(t0()));
        let mock = Arc::new(MockPlatformClient::default());
        let coordinator = coordinator(&store, &clock, &mock);
        Fixture { _dir: dir, store, clock, mock, coordinator, dataset }
    }

    fn coordinator(store: &Store, clock: &Arc<ManualClock>, mock: &Arc<MockPlatformClient>) -> Coordinator {
        let clients: BTreeMap<String, Arc<dyn PlatformClient>> = ["mturk", "crowdflower"]
            .into_iter()
            .map(|p| (p.to_string(), mock.clone() as Arc<dyn PlatformClient>))
            .collect();
        Coordinator::open(store.clone(), clock.clone(), clients).unwrap()
    }

    fn request(f: &Fixture, images: usize, mode: CrowdMode, k: usize) -> BatchRequest {
        BatchRequest {
            job_id: "j1".into(),
            dataset_ref: f.dataset.dataset_ref.clone(),
            image_ids: f.dataset.manifest.pool_ids().into_iter().take(images).collect(),
            crowd_mode: mode,
            annotation_type: AnnotationType::Classification,
            label_schema: vec!["a".into(), "b".into()],
            redundancy_k: k,
            reference_image: None,
        }
    }

    #[test]
    fn tokens_are_distinct_and_urls_embed_them() {
        let f = fixture();
        f.coordinator.set_base_url("http://h:1/");
        let a = f.coordinator.open_batch(request(&f, 2, CrowdMode::Private, 1)).unwrap();
        let b = f.coordinator.open_batch(request(&f, 2, CrowdMode::Private, 1)).unwrap();
        assert_ne!(a.batch.token, b.batch.token);
        assert_eq!(a.url, format!("http://h:1/work/{}", a.batch.token));
        assert_eq!(data_encoding::BASE32_NOPAD.decode(a.batch.token.to_uppercase().as_bytes()).unwrap().len(), 16);
        assert!(f.mock.postings().is_empty());
        assert_eq!(f.coordinator.open_batch(request(&f, 0, CrowdMode::Private, 1)).unwrap_err().code(), "EmptyBatch");
    }

    #[test]
    fn public_batches_post_to_every_platform() {
        let f = fixture();
        let a = f.coordinator.open_batch(request(&f, 2, CrowdMode::Public, 1)).unwrap();
        assert_eq!(f.mock.postings().len(), 2);
        assert!(f.mock.postings().iter().all(|p| p.url == a.url));
        let b = f.coordinator.open_batch(request(&f, 2, CrowdMode::Public, 1)).unwrap();
        let receipts: BTreeSet<_> = a.batch.receipts.iter().chain(&b.batch.receipts).map(|r| r.external_id.clone()).collect();
        assert_eq!(receipts.len(), 4);
        assert!(receipts.contains("mock-1"));
    }

    #[test]
    fn failing_platform_leaves_batch_open() {
        let f = fixture();
        f.mock.fail_platform("mturk");
        let opened = f.coordinator.open_batch(request(&f, 2, CrowdMode::Public, 1)).unwrap();
        let failed: Vec<_> = opened.postings.iter().filter(|p| p.error.is_some()).collect();
        assert_eq!(failed.len(), 1);
        assert!(failed[0].error.as_ref().unwrap().contains("unavailable"));
        assert_eq!(opened.batch.status, BatchStatus::Open);
        assert!(f.coordinator.start_session(&opened.batch.token, "ann", PRIVATE_PROFILE).is_ok());
    }

    #[test]
    fn deadlines_follow_profiles() {
        let f = fixture();
        let opened = f.coordinator.open_batch(request(&f, 2, CrowdMode::Private, 1)).unwrap();
        let cf = f.coordinator.start_session(&opened.batch.token, "x", "crowdflower").unwrap();
        assert_eq!(cf.session.deadline, Some(t0() + Duration::minutes(30)));
        let p = f.coordinator.start_session(&opened.batch.token, "y", PRIVATE_PROFILE).unwrap();
        assert_eq!(p.session.deadline, None);
        assert_eq!(
            f.coordinator.start_session(&opened.batch.token, "z", "nowhere").unwrap_err().code(),
            "UnknownPlatform"
        );
        assert_eq!(f.coordinator.start_session("nope", "z", PRIVATE_PROFILE).unwrap_err().code(), "UnknownToken");
    }

    #[test]
    fn submission_rules_and_completion() {
        let f = fixture();
        let opened = f.coordinator.open_batch(request(&f, 2, CrowdMode::Private, 2)).unwrap();
        let token = &opened.batch.token;
        let s1 = f.coordinator.start_session(token, "w1", PRIVATE_PROFILE).unwrap();
        let sid = &s1.session.session_id;
        let img0 = opened.batch.image_ids[0].clone();
        let img1 = opened.batch.image_ids[1].clone();
        assert_eq!(s1.item.image_id, img0);

        let err = f.coordinator.submit(token, sid, &img0, Label::class("zzz")).unwrap_err();
        assert_eq!(err.code(), "UnknownLabel");
        let err = f.coordinator.submit(token, sid, &img0, Label::BBox { x: 0.5, y: 0.0, w: 0.7, h: 0.1 }).unwrap_err();
        assert_eq!(err.code(), "WrongLabelType");
        let out = f.coordinator.submit(token, sid, &img0, Label::class("a")).unwrap();
        assert_eq!(out.next.as_ref().unwrap().image_id, img1);
        let err = f.coordinator.submit(token, sid, &img0, Label::class("b")).unwrap_err();
        assert_eq!(err.code(), "DuplicateAnnotation");
        let out = f.coordinator.submit(token, sid, &img1, Label::class("b")).unwrap();
        assert!(out.portion_done && !out.batch_complete);
        assert_eq!(f.coordinator.start_session(token, "w1", PRIVATE_PROFILE).unwrap_err().code(), "NothingLeft");

        let s2 = f.coordinator.start_session(token, "w2", PRIVATE_PROFILE).unwrap();
        let out = f.coordinator.submit(token, &s2.session.session_id, &img0, Label::class("a")).unwrap();
        assert!(!out.completed_now);
        assert_eq!(f.coordinator.progress(&opened.batch.batch_id).unwrap().images_at_k, 1);
        let out = f.coordinator.submit(token, &s2.session.session_id, &img1, Label::class("a")).unwrap();
        assert!(out.completed_now && out.batch_complete);
        assert_eq!(f.coordinator.start_session(token, "w3", PRIVATE_PROFILE).unwrap_err().code(), "BatchClosed");
        assert_eq!(f.coordinator.annotations(&opened.batch.batch_id).unwrap().len(), 4);
    }

    #[test]
    fn session_timer_edges() {
        let f = fixture();
        let opened = f.coordinator.open_batch(request(&f, 3, CrowdMode::Private, 1)).unwrap();
        let token = &opened.batch.token;
        let ids = &opened.batch.image_ids;
        let s = f.coordinator.start_session(token, "cf", "crowdflower").unwrap().session;
        f.clock.set(t0() + Duration::minutes(30) - Duration::seconds(1));
        f.coordinator.submit(token, &s.session_id, &ids[0], Label::class("a")).unwrap();
        f.clock.set(t0() + Duration::minutes(30));
        f.coordinator.submit(token, &s.session_id, &ids[1], Label::class("a")).unwrap();
        f.clock.set(t0() + Duration::minutes(30) + Duration::seconds(1));
        let err = f.coordinator.submit(token, &s.session_id, &ids[2], Label::class("a")).unwrap_err();
        assert_eq!(err.code(), "SessionExpired");
        assert_eq!(f.coordinator.finish(token, &s.session_id).unwrap_err().code(), "SessionExpired");
        assert!(!f.coordinator.session(&s.session_id).unwrap().completed);
        for a in f.coordinator.annotations(&opened.batch.batch_id).unwrap() {
            assert!(a.submitted_at <= s.deadline.unwrap());
        }
    }

    #[test]
    fn survey_codes() {
        let f = fixture();
        let opened = f.coordinator.open_batch(request(&f, 2, CrowdMode::Private, 1)).unwrap();
        let token = &opened.batch.token;
        let s = f.coordinator.start_session(token, "a", PRIVATE_PROFILE).unwrap();
        let sid = s.session.session_id.clone();
        assert_eq!(f.coordinator.finish(token, &sid).unwrap_err().code(), "NoWorkDone");
        f.coordinator.submit(token, &sid, &s.item.image_id, Label::class("a")).unwrap();
        let code = f.coordinator.finish(token, &sid).unwrap();
        assert_eq!(code.len(), 8);
        assert!(code.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(f.coordinator.finish(token, &sid).unwrap(), code);
        assert!(f.coordinator.verify_survey_code(&sid, &code));
        let tampered = match code.strip_prefix('0') {
            Some(rest) => format!("1{rest}"),
            None => format!("0{}", &code[1..]),
        };
        assert!(!f.coordinator.verify_survey_code(&sid, &tampered));
        assert_eq!(survey_code("s-1", b"k"), survey_code("s-1", b"k"));
        assert_ne!(survey_code("s-1", b"k"), survey_code("s-2", b"k"));
        let err = f.coordinator.submit(token, &sid, &opened.batch.image_ids[1], Label::class("a")).unwrap_err();
        assert_eq!(err.code(), "SessionCompleted");
    }

    #[test]
    fn replay_after_restart() {
        let f = fixture();
        let opened = f.coordinator.open_batch(request(&f, 2, CrowdMode::Private, 2)).unwrap();
        let token = opened.batch.token.clone();
        let s = f.coordinator.start_session(&token, "a", PRIVATE_PROFILE).unwrap();
        for id in &opened.batch.image_ids {
            f.coordinator.submit(&token, &s.session.session_id, id, Label::class("a")).unwrap();
        }
        let log = f.store.annotations("j1", &opened.batch.batch_id);
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log)
            .and_then(|mut fh| std::io::Write::write_all(&mut fh, b"{\"batch_id\":\"b"))
            .unwrap();
        let again = coordinator(&f.store, &f.clock, &f.mock);
        let progress = again.progress(&opened.batch.batch_id).unwrap();
        assert_eq!(progress.counts.values().sum::<usize>(), 2);
        assert_eq!(progress.status, BatchStatus::Open);
        assert_eq!(again.session(&s.session.session_id).unwrap().worker_id, s.session.worker_id);
        let resumed = again.start_session(&token, "b", PRIVATE_PROFILE).unwrap();
        again.submit(&token, &resumed.session.session_id, &opened.batch.image_ids[0], Label::class("b")).unwrap();
        assert_eq!(read_jsonl::<WorkerAnnotation>(&log).unwrap().len(), 3);
    }

    #[test]
    fn concurrent_submissions_complete_once() {
        let f = fixture();
        let opened = f.coordinator.open_batch(request(&f, 4, CrowdMode::Private, 3)).unwrap();
        let token = opened.batch.token.clone();
        let completions = AtomicU64::new(0);
        std::thread::scope(|scope| {
            for w in 0..6 {
                let c = &f.coordinator;
                let token = &token;
                let completions = &completions;
                scope.spawn(move || {
                    let Ok(start) = c.start_session(token, &format!("w{w}"), PRIVATE_PROFILE) else {
                        return;
                    };
                    let mut item = Some(start.item);
                    while let Some(i) = item {
                        match c.submit(token, &start.session.session_id, &i.image_id, Label::class("a")) {
                            Ok(out) => {
                                if out.completed_now {
                                    completions.fetch_add(1, Ordering::SeqCst);
                                }
                                item = out.next;
                            }
                            Err(_) => break,
                        }
                    }
                });
            }
        });
        assert_eq!(completions.load(Ordering::SeqCst), 1);
        let annotations = f.coordinator.annotations(&opened.batch.batch_id).unwrap();
        let pairs: BTreeSet<_> = annotations.iter().map(|a| (&a.image_id, &a.worker_id)).collect();
        assert_eq!(pairs.len(), annotations.len());
        let p = f.coordinator.progress(&opened.batch.batch_id).unwrap();
        assert_eq!(p.status, BatchStatus::Complete);
        assert!(p.counts.values().all(|&c| c >= 3));
    }
}
