//! HTTP API over [`ashwin_core::app::App`].

use std::sync::Arc;

use ashwin_core::app::App;
use ashwin_core::engine::ClassifyInput;
use ashwin_core::model::{JobSpec, Label};
use ashwin_core::plugin::{Reviewer, Verdict};
use ashwin_core::Error;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};

const UPLOAD_LIMIT: usize = 512 * 1024 * 1024;

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub http_status: u16,
    pub message: String,
}

/// HTTP status for each domain error.
pub fn status_for(e: &Error) -> u16 {
    use Error::*;
    match e {
        NotFound(_) | UnknownPlugin(_) | VersionNotFound(_) | UnknownToken | UnknownSession(_) => 404,
        Forbidden(_) => 403,
        WrongState(_) | PoolExhausted | IllegalTransition { .. } | DuplicateNameVersion { .. } | AlreadyDecided(_)
        | BatchClosed | NothingLeft | SessionCompleted | DuplicateAnnotation(_) | NoWorkDone | EmptyHoldout => 409,
        SessionExpired => 410,
        StageMismatch(_) | UnapprovedPlugin(_) | EmptySeed | UnknownSeedImage(_) | BadLabelSchema(_)
        | ManifestMissing | ManifestInvalid(_) | MethodStageMismatch { .. } | EmptyImage
        | DimensionMismatch { .. } | UnknownLabel(_) | EmptyTrainingSet | EmptyPool | MissingAnnotations(_)
        | UnknownClass(_) | EmptyBatch | UnknownPlatform(_) | ImageNotInBatch(_) | WrongLabelType(_)
        | GeometryOutOfRange(_) | EmptySource { .. } | CorruptArchive(_) | UndecodableImage(_)
        | InvalidDocument(_) | WindowLargerThanImage { .. } | RegionTooLarge { .. } | InvalidArgument(_) => 400,
        PluginCrashed { .. } | MalformedResponse(_) | PluginError(_) | SamplerContractViolation(_)
        | ConsensusContractViolation(_) => 502,
        PlatformUnavailable { .. } => 503,
        PluginTimeout(_) => 504,
        Io { .. } => 500,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self { code: e.code().to_string(), http_status: status_for(&e), message: e.to_string() }
    }
}

impl ApiError {
    fn internal(message: impl Into<String>) -> Self {
        Self { code: "Internal".into(), http_status: 500, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self { code: "InvalidArgument".into(), http_status: 400, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ashwin_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::internal(format!("worker task failed: {e}"))),
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
}

fn admin(app: &App, headers: &HeaderMap) -> ApiResult<()> {
    app.require_admin(bearer(headers)).map_err(ApiError::from)
}

type AppState = State<Arc<App>>;

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/api/jobs", post(create_job))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/batches", post(request_batch))
        .route("/api/jobs/{id}/events", get(job_events))
        .route("/api/plugins", post(upload_plugin).get(list_plugins))
        .route("/api/plugins/{id}/approval", post(approve_plugin))
        .route("/api/plugins/{id}/conformance", post(check_plugin))
        .route("/api/work/{token}/next", get(work_next))
        .route("/api/work/{token}/annotations", post(submit_annotation))
        .route("/api/work/{token}/finish", post(finish_session))
        .route("/api/work/{token}/verify", post(verify_code))
        .route("/api/work/{token}/images/{image_id}", get(work_image))
        .route("/api/models/{job}/versions", get(model_versions))
        .route("/api/models/{job}/{version}/classify", post(classify))
        .route("/work/{token}", get(work_page))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .with_state(app)
}

/// Serves until the listener fails. The coordinator's base URL is set from the bound address.
pub async fn serve(app: Arc<App>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let addr = listener.local_addr()?;
    app.set_base_url(format!("http://{addr}"));
    axum::serve(listener, router(app)).await
}

async fn read_multipart(mut mp: Multipart) -> ApiResult<Vec<(String, Bytes)>> {
    let mut out = Vec::new();
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        out.push((name, bytes));
    }
    Ok(out)
}

fn field<'a>(fields: &'a [(String, Bytes)], name: &str) -> Option<&'a Bytes> {
    fields.iter().find(|(n, _)| n == name).map(|(_, b)| b)
}

fn text_field(fields: &[(String, Bytes)], name: &str) -> ApiResult<Option<String>> {
    field(fields, name)
        .map(|b| String::from_utf8(b.to_vec()).map_err(|_| ApiError::bad_request(format!("field `{name}` is not UTF-8"))))
        .transpose()
}

/// Multipart fields: `job` (job.json), `dataset` (ZIP archive), optional `owner`.
async fn create_job(State(app): AppState, headers: HeaderMap, mp: Multipart) -> ApiResult<impl IntoResponse> {
    // drain the upload first so a rejected client still receives the response
    let fields = read_multipart(mp).await?;
    admin(&app, &headers)?;
    let job = field(&fields, "job").ok_or_else(|| ApiError::bad_request("missing `job` field"))?;
    let spec: JobSpec = serde_json::from_slice(job).map_err(|e| ApiError::from(Error::from(e)))?;
    let dataset = field(&fields, "dataset")
        .ok_or_else(|| ApiError::bad_request("missing `dataset` field"))?
        .clone();
    let owner = text_field(&fields, "owner")?;
    let status = blocking(move || app.create_job_from_archive(spec, &dataset, owner.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(status)))
}

async fn job_status(State(app): AppState, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || app.job_status(&id)).await?))
}

async fn request_batch(State(app): AppState, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || app.request_batch(&id)).await?))
}

async fn job_events(State(app): AppState, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || app.job_events(&id)).await?))
}

#[derive(Deserialize)]
struct PluginQuery {
    viewer: Option<String>,
}

async fn list_plugins(
    State(app): AppState,
    headers: HeaderMap,
    Query(q): Query<PluginQuery>,
) -> ApiResult<impl IntoResponse> {
    let is_admin = app.is_admin(bearer(&headers)) && q.viewer.is_none();
    Ok(Json(app.list_plugins(q.viewer.as_deref(), is_admin)))
}

/// Multipart fields: `archive` (ZIP), `owner`, optional `visibility` (`public` or `private`).
async fn upload_plugin(State(app): AppState, headers: HeaderMap, mp: Multipart) -> ApiResult<impl IntoResponse> {
    // drain the upload first so a rejected client still receives the response
    let fields = read_multipart(mp).await?;
    admin(&app, &headers)?;
    let archive = field(&fields, "archive")
        .ok_or_else(|| ApiError::bad_request("missing `archive` field"))?
        .clone();
    let owner = text_field(&fields, "owner")?.unwrap_or_else(|| "admin".into());
    let public = match text_field(&fields, "visibility")?.as_deref() {
        None | Some("private") => false,
        Some("public") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown visibility `{other}`"))),
    };
    let p = blocking(move || app.add_plugin(&archive, &owner, public)).await?;
    Ok((StatusCode::CREATED, Json(p)))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VerdictBody {
    Approved,
    Rejected,
}

#[derive(Debug, Deserialize)]
struct ApprovalBody {
    verdict: VerdictBody,
    #[serde(default)]
    reason: Option<String>,
    #[serde(default)]
    reviewer: Option<String>,
}

async fn approve_plugin(
    State(app): AppState,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(body): Json<ApprovalBody>,
) -> ApiResult<impl IntoResponse> {
    admin(&app, &headers)?;
    let reviewer = Reviewer { id: body.reviewer.unwrap_or_else(|| "admin".into()), is_admin: true };
    let verdict = match body.verdict {
        VerdictBody::Approved => Verdict::Approved,
        VerdictBody::Rejected => Verdict::Rejected(body.reason.unwrap_or_default()),
    };
    Ok(Json(blocking(move || app.approve_plugin(&id, &reviewer, verdict)).await?))
}

async fn check_plugin(State(app): AppState, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    admin(&app, &headers)?;
    Ok(Json(blocking(move || app.check_plugin(&id, None)).await?))
}

#[derive(Deserialize)]
struct NextQuery {
    worker: String,
    #[serde(default)]
    platform: Option<String>,
}

async fn work_next(
    State(app): AppState,
    Path(token): Path<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<impl IntoResponse> {
    let platform = q.platform.unwrap_or_else(|| ashwin_core::coordination::PRIVATE_PROFILE.into());
    Ok(Json(blocking(move || app.work_next(&token, &q.worker, &platform)).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationBody {
    pub session_id: String,
    pub image_id: String,
    pub label: Label,
}

async fn submit_annotation(
    State(app): AppState,
    Path(token): Path<String>,
    Json(body): Json<AnnotationBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || app.submit(&token, &body.session_id, &body.image_id, body.label)).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionBody {
    pub session_id: String,
}

async fn finish_session(
    State(app): AppState,
    Path(token): Path<String>,
    Json(body): Json<SessionBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || app.finish(&token, &body.session_id)).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyBody {
    pub session_id: String,
    pub survey_code: String,
}

async fn verify_code(
    State(app): AppState,
    Path(token): Path<String>,
    Json(body): Json<VerifyBody>,
) -> ApiResult<impl IntoResponse> {
    let valid = blocking(move || {
        let session = app.coordinator().session(&body.session_id)?;
        let batch = app.coordinator().batch_by_token(&token)?;
        Ok(session.batch_id == batch.batch_id && app.coordinator().verify_survey_code(&body.session_id, &body.survey_code))
    })
    .await?;
    Ok(Json(serde_json::json!({ "valid": valid })))
}

async fn work_image(State(app): AppState, Path((token, image_id)): Path<(String, String)>) -> ApiResult<Response> {
    let (path, bytes) = blocking(move || {
        let path = app.image_file(&token, &image_id)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, bytes))
    })
    .await?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("pgm" | "ppm" | "pbm" | "pnm") => "image/x-portable-anymap",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn model_versions(State(app): AppState, Path(job): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || Ok(app.job_status(&job)?.versions)).await?))
}

/// Either `features` (a feature vector) or `image` (base64-encoded PNG or PNM bytes).
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ClassifyBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

async fn classify(
    State(app): AppState,
    Path((job, version)): Path<(String, u32)>,
    Json(body): Json<ClassifyBody>,
) -> ApiResult<impl IntoResponse> {
    let input = match (body.features, body.image) {
        (Some(f), None) => ClassifyInput::Features(f),
        (None, Some(b64)) => ClassifyInput::Image(
            base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::from(Error::UndecodableImage(format!("bad base64: {e}"))))?,
        ),
        _ => return Err(ApiError::bad_request("give exactly one of `features` or `image`")),
    };
    Ok(Json(blocking(move || app.classify(&job, version, input)).await?))
}

async fn work_page(State(app): AppState, Path(token): Path<String>) -> ApiResult<impl IntoResponse> {
    let batch = blocking(move || app.coordinator().batch_by_token(&token)).await?;
    Ok(Html(format!(
        "<!doctype html><html><head><title>Annotation batch</title></head><body>\
         <h1>Annotation batch {}</h1><p>{} images, {:?} labels. \
         Start with <code>GET /api/work/{}/next?worker=NAME</code>.</p></body></html>",
        batch.batch_id,
        batch.image_ids.len(),
        batch.annotation_type,
        batch.token
    )))
}
