use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::service::TrialService;
use crate::TrialError;

const INDEX_HTML: &str = include_str!("../static/index.html");

impl IntoResponse for TrialError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.code(), "message": self.to_string() }))).into_response()
    }
}

type Shared = State<Arc<TrialService>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    subject_label: String,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Answer {
    prediction: serde_json::Value,
    #[serde(default)]
    trial_index: Option<usize>,
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, TrialError> {
    serde_json::from_slice(body).map_err(|e| TrialError::BadRequest(e.to_string()))
}

async fn create_session(State(svc): Shared, body: Bytes) -> Result<Response, TrialError> {
    let req: NewSession = parse(&body)?;
    let created = svc.create_session(req.subject_label, req.seed)?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn trial(State(svc): Shared, Path(id): Path<String>) -> Result<Response, TrialError> {
    Ok(Json(svc.current_trial(&id)?).into_response())
}

async fn respond(State(svc): Shared, Path(id): Path<String>, body: Bytes) -> Result<Response, TrialError> {
    let req: Answer = serde_json::from_slice(&body).map_err(|e| TrialError::BadPrediction(e.to_string()))?;
    let prediction = req
        .prediction
        .as_str()
        .ok_or_else(|| TrialError::BadPrediction("prediction must be a string".into()))?
        .parse()?;
    Ok(Json(svc.respond(&id, prediction, req.trial_index)?).into_response())
}

async fn results(State(svc): Shared, Path(id): Path<String>) -> Result<Response, TrialError> {
    Ok(Json(svc.results(&id)?).into_response())
}

async fn aggregate(State(svc): Shared) -> Result<Response, TrialError> {
    Ok(Json(svc.aggregate()?).into_response())
}

async fn image(State(svc): Shared, Path((id, frame)): Path<(String, String)>) -> Result<Response, TrialError> {
    let png = svc.image_png(&id, &frame)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

/// The API under `/api`, plus the browser UI at `/`: files from
/// `static_dir` when given, otherwise a minimal built-in page.
pub fn router(service: Arc<TrialService>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/trial", get(trial))
        .route("/api/session/{id}/response", post(respond))
        .route("/api/session/{id}/results", get(results))
        .route("/api/aggregate", get(aggregate))
        .route("/api/image/{id}/{frame}", get(image))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(index)),
    }
}
