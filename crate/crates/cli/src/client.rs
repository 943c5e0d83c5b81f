//! Blocking HTTP client for the API.

use std::fmt;
use std::time::Duration;

use ashwin_core::app::{BatchSummary, FinishResponse, SubmitResponse};
use ashwin_core::coordination::SessionStart;
use ashwin_core::engine::{ClassifyResult, EventRecord, JobStatus, ModelVersion};
use ashwin_core::model::{JobSpec, Label};
use ashwin_core::plugin::{ConformanceReport, PluginDescriptor};
use ashwin_core::sim::WorkSurface;
use ashwin_server::{AnnotationBody, ApiError, ClassifyBody, SessionBody};
use base64::Engine as _;
use reqwest::blocking::{multipart, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde_json::json;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug)]
pub enum ClientError {
    Api(ApiError),
    Transport(String),
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientError::Api(e) => write!(f, "{} ({}): {}", e.code, e.http_status, e.message),
            ClientError::Transport(m) => write!(f, "transport: {m}"),
        }
    }
}

impl std::error::Error for ClientError {}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api(e) => Some(&e.code),
            ClientError::Transport(_) => None,
        }
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base: impl Into<String>, token: Option<String>) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .build()
            .expect("http client");
        Self { base: base.into().trim_end_matches('/').to_string(), token, http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn auth(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> ClientResult<T> {
        let resp = self.auth(req).send().map_err(|e| ClientError::Transport(e.to_string()))?;
        decode(resp)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> ClientResult<T> {
        self.send(self.http.get(self.url(path)))
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &impl serde::Serialize) -> ClientResult<T> {
        self.send(self.http.post(self.url(path)).json(body))
    }

    pub fn create_job(&self, spec: &JobSpec, dataset_zip: Vec<u8>, owner: Option<&str>) -> ClientResult<JobStatus> {
        let job = serde_json::to_vec(spec).map_err(|e| ClientError::Transport(e.to_string()))?;
        let mut form = multipart::Form::new()
            .part("job", multipart::Part::bytes(job).file_name("job.json"))
            .part("dataset", multipart::Part::bytes(dataset_zip).file_name("dataset.zip"));
        if let Some(o) = owner {
            form = form.text("owner", o.to_string());
        }
        self.send(self.http.post(self.url("/api/jobs")).multipart(form))
    }

    pub fn job_status(&self, job: &str) -> ClientResult<JobStatus> {
        self.get(&format!("/api/jobs/{job}"))
    }

    pub fn events(&self, job: &str) -> ClientResult<Vec<EventRecord>> {
        self.get(&format!("/api/jobs/{job}/events"))
    }

    pub fn request_batch(&self, job: &str) -> ClientResult<BatchSummary> {
        self.post(&format!("/api/jobs/{job}/batches"), &json!({}))
    }

    pub fn versions(&self, job: &str) -> ClientResult<Vec<ModelVersion>> {
        self.get(&format!("/api/models/{job}/versions"))
    }

    pub fn add_plugin(&self, archive: Vec<u8>, owner: &str, public: bool) -> ClientResult<PluginDescriptor> {
        let form = multipart::Form::new()
            .part("archive", multipart::Part::bytes(archive).file_name("plugin.zip"))
            .text("owner", owner.to_string())
            .text("visibility", if public { "public" } else { "private" });
        self.send(self.http.post(self.url("/api/plugins")).multipart(form))
    }

    pub fn approve_plugin(&self, id: &str, reject_reason: Option<&str>) -> ClientResult<PluginDescriptor> {
        let body = match reject_reason {
            None => json!({ "verdict": "approved" }),
            Some(r) => json!({ "verdict": "rejected", "reason": r }),
        };
        self.post(&format!("/api/plugins/{id}/approval"), &body)
    }

    pub fn list_plugins(&self, viewer: Option<&str>) -> ClientResult<Vec<PluginDescriptor>> {
        let mut req = self.http.get(self.url("/api/plugins"));
        if let Some(v) = viewer {
            req = req.query(&[("viewer", v)]);
        }
        self.send(req)
    }

    pub fn check_plugin(&self, id: &str) -> ClientResult<ConformanceReport> {
        self.post(&format!("/api/plugins/{id}/conformance"), &json!({}))
    }

    pub fn classify_features(&self, job: &str, version: u32, features: Vec<f64>) -> ClientResult<ClassifyResult> {
        let body = ClassifyBody { features: Some(features), image: None };
        self.post(&format!("/api/models/{job}/{version}/classify"), &body)
    }

    pub fn classify_image(&self, job: &str, version: u32, bytes: &[u8]) -> ClientResult<ClassifyResult> {
        let body = ClassifyBody { features: None, image: Some(base64::engine::general_purpose::STANDARD.encode(bytes)) };
        self.post(&format!("/api/models/{job}/{version}/classify"), &body)
    }
}

fn decode<T: DeserializeOwned>(resp: Response) -> ClientResult<T> {
    let status = resp.status();
    let bytes = resp.bytes().map_err(|e| ClientError::Transport(e.to_string()))?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| ClientError::Transport(format!("bad response body: {e}")));
    }
    match serde_json::from_slice::<ApiError>(&bytes) {
        Ok(e) => Err(ClientError::Api(e)),
        Err(_) => Err(ClientError::Transport(format!("{status}: {}", String::from_utf8_lossy(&bytes)))),
    }
}

impl WorkSurface for Client {
    type Error = ClientError;

    fn start(&self, token: &str, worker: &str, platform: &str) -> ClientResult<SessionStart> {
        let req = self
            .http
            .get(self.url(&format!("/api/work/{token}/next")))
            .query(&[("worker", worker), ("platform", platform)]);
        self.send(req)
    }

    fn submit(&self, token: &str, session_id: &str, image_id: &str, label: &Label) -> ClientResult<SubmitResponse> {
        let body = AnnotationBody { session_id: session_id.into(), image_id: image_id.into(), label: label.clone() };
        self.post(&format!("/api/work/{token}/annotations"), &body)
    }

    fn finish(&self, token: &str, session_id: &str) -> ClientResult<FinishResponse> {
        self.post(&format!("/api/work/{token}/finish"), &SessionBody { session_id: session_id.into() })
    }

    fn error_code(error: &ClientError) -> Option<String> {
        error.code().map(str::to_string)
    }
}
