//! JSON/PNG HTTP facade over a loaded [`Workbench`]: class list, sample
//! listing, queued explanation jobs and content-addressed assets.

pub mod jobs;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use perceptvis::config::AppConfig;
use perceptvis::data::Outcome;
use perceptvis::digest::Digest;
use perceptvis::workbench::{SampleQuery, Workbench, DEFAULT_PAGE_SIZE};
use perceptvis::Error;
use serde::Deserialize;
use serde_json::{json, Value};

pub use jobs::{Job, JobStatus, ServiceState, Submission};

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    stage: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
            stage: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unavailable(state: &ServiceState) -> Self {
        let message = match state.load_error() {
            Some(e) => format!("model failed to load: {e}"),
            None => "model is not loaded yet".to_string(),
        };
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Argument(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ if e.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            kind: e.kind(),
            stage: e.stage().map(str::to_string),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"kind": self.kind, "message": self.message});
        if let Some(stage) = self.stage {
            body["stage"] = Value::String(stage);
        }
        (self.status, Json(json!({ "error": body }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn loaded(state: &ServiceState) -> ApiResult<&Arc<Workbench>> {
    state.workbench().ok_or_else(|| ApiError::unavailable(state))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/classes", get(classes))
        .route("/api/samples", get(samples))
        .route("/api/explanations", post(create_explanation))
        .route("/api/explanations/{id}", get(get_explanation))
        .route("/assets/{file}", get(asset))
        .with_state(state)
}

async fn status(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    Json(match state.workbench() {
        Some(wb) => json!({
            "loaded": true,
            "classifier_digest": wb.bundle().weights_digest(),
            "decoder_digest": wb.decoder().digest(),
            "samples": wb.outcomes().len(),
            "threshold": wb.threshold(),
        }),
        None => json!({"loaded": false, "error": state.load_error()}),
    })
}

async fn classes(State(state): State<Arc<ServiceState>>) -> ApiResult<Json<Value>> {
    let wb = loaded(&state)?;
    Ok(Json(json!({ "classes": wb.class_names() })))
}

fn parse_outcome(v: &str) -> Option<Outcome> {
    [Outcome::Correct, Outcome::Incorrect, Outcome::Mixed]
        .into_iter()
        .find(|o| o.as_str() == v)
}

fn parse_count(key: &str, v: &str) -> ApiResult<usize> {
    v.parse()
        .map_err(|_| ApiError::bad_request(format!("{key} must be a positive integer, got {v:?}")))
}

/// Builds a listing query from raw parameters. Empty values mean "no filter".
pub fn sample_query(wb: &Workbench, params: &HashMap<String, String>) -> ApiResult<SampleQuery> {
    let mut q = SampleQuery {
        page: 1,
        page_size: DEFAULT_PAGE_SIZE,
        ..Default::default()
    };
    for (key, value) in params {
        if value.is_empty() {
            continue;
        }
        match key.as_str() {
            "outcome" => {
                q.outcome = Some(parse_outcome(value).ok_or_else(|| {
                    ApiError::bad_request(format!(
                        "unknown outcome {value:?}; expected correct, incorrect or mixed"
                    ))
                })?)
            }
            "class" => {
                q.class_index = Some(
                    wb.parse_class(value)
                        .ok_or_else(|| ApiError::bad_request(format!("unknown class {value:?}")))?,
                )
            }
            "page" => q.page = parse_count(key, value)?,
            "page_size" => q.page_size = parse_count(key, value)?,
            other => return Err(ApiError::bad_request(format!("unknown query parameter {other:?}"))),
        }
    }
    Ok(q)
}

async fn samples(
    State(state): State<Arc<ServiceState>>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let wb = loaded(&state)?;
    let q = sample_query(wb, &params)?;
    let page = wb
        .list_samples(&q)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(serde_json::to_value(page).expect("serializable page")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainBody {
    sample_id: String,
    #[serde(default)]
    class_index: Option<i64>,
}

async fn create_explanation(
    State(state): State<Arc<ServiceState>>,
    body: Bytes,
) -> ApiResult<Response> {
    let wb = loaded(&state)?;
    let req: ExplainBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    let class = match req.class_index {
        None => None,
        Some(c) if c >= 0 => Some(c as usize),
        Some(c) => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "argument",
                format!("class index {c} is negative"),
            ))
        }
    };
    let class_index = wb.resolve_class(&req.sample_id, class)?;
    let (code, job) = match state.submit(&req.sample_id, class_index, wb.decoder().digest()) {
        Submission::Created(job) => (StatusCode::ACCEPTED, job),
        Submission::Existing(job) => (StatusCode::OK, job),
    };
    Ok((code, Json(job_view(wb, &job))).into_response())
}

pub fn asset_url(digest: &Digest) -> String {
    format!("/assets/{digest}.png")
}

/// JSON form of a job: status, and once done the explanation summary,
/// class scores and asset URLs.
pub fn job_view(wb: &Workbench, job: &Job) -> Value {
    let names = wb.class_names();
    let mut v = json!({
        "job_id": job.id,
        "sample_id": job.sample_id,
        "class_index": job.class_index,
        "class_name": names[job.class_index],
        "status": job.status,
    });
    if let Some(summary) = &job.summary {
        let scores: BTreeMap<&str, f64> = names
            .iter()
            .map(String::as_str)
            .zip(summary.posteriors.iter().copied())
            .collect();
        v["scores"] = json!({
            "posteriors": summary.posteriors,
            "by_class": scores,
            "top_class": summary.top_class,
            "prediction_set": summary.prediction_set,
            "threshold": summary.threshold,
        });
        v["summary"] = serde_json::to_value(summary).expect("serializable summary");
    }
    if !job.assets.is_empty() {
        let urls: BTreeMap<&str, String> = job
            .assets
            .iter()
            .map(|(k, d)| (k.as_str(), asset_url(d)))
            .collect();
        v["assets"] = json!(urls);
        v["asset_digests"] = json!(job
            .assets
            .iter()
            .map(|(k, d)| (k.as_str(), d))
            .collect::<BTreeMap<_, _>>());
    }
    if let Some(f) = &job.failure {
        v["error"] = json!(f);
    }
    v
}

async fn get_explanation(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let wb = loaded(&state)?;
    let job = state
        .job(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown job {id}")))?;
    let code = if job.status == JobStatus::Failed {
        StatusCode::INTERNAL_SERVER_ERROR
    } else {
        StatusCode::OK
    };
    Ok((code, Json(job_view(wb, &job))).into_response())
}

async fn asset(
    State(state): State<Arc<ServiceState>>,
    Path(file): Path<String>,
) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no asset {file}"));
    let digest: Digest = file
        .strip_suffix(".png")
        .and_then(|hex| hex.parse().ok())
        .ok_or_else(not_found)?;
    let bytes = state.asset(&digest).ok_or_else(not_found)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes.as_ref().clone(),
    )
        .into_response())
}

/// Binds, starts loading the model in the background and serves until
/// interrupted. Endpoints answer 503 until the model is ready.
pub async fn serve(cfg: AppConfig) -> perceptvis::Result<()> {
    let state = ServiceState::new(cfg.asset_dir.clone());
    let addr = format!("{}:{}", cfg.bind, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    tracing::info!("listening on {addr}");
    let loader = Arc::clone(&state);
    tokio::task::spawn_blocking(move || match Workbench::open(&cfg) {
        Ok(wb) => {
            tracing::info!("model loaded: {} samples", wb.outcomes().len());
            loader.set_workbench(wb);
        }
        Err(e) => {
            tracing::error!("model failed to load: {e}");
            loader.set_load_error(e.to_string());
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io("http listener", e))
}
