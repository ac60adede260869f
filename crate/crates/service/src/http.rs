//! JSON over HTTP. Response times travel in milliseconds.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ServiceError;
use crate::service::{CreateSession, Service};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnswerBody {
    pub answer: bool,
    pub rt_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ExtendBody {
    #[serde(default)]
    pub extra: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuestionnaireBody {
    pub attention: u8,
    pub anxiety: u8,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) | ServiceError::Protocol(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) | ServiceError::Core(dualrl::Error::InvalidInput(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Resting { .. } => StatusCode::TOO_MANY_REQUESTS,
            ServiceError::Core(_) | ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.to_string() });
        let mut resp_headers = Vec::new();
        if let ServiceError::Resting { phase, retry_after_ms } = &self {
            body["phase"] = json!(phase);
            body["retry_after_ms"] = json!(retry_after_ms);
            let secs = retry_after_ms.div_ceil(1000).max(1);
            resp_headers.push((header::RETRY_AFTER, HeaderValue::from(secs)));
        }
        let mut resp = (status, Json(body)).into_response();
        resp.headers_mut().extend(resp_headers);
        resp
    }
}

type Shared = State<Arc<Service>>;
type ApiResult = Result<Response, ServiceError>;

async fn create(State(svc): Shared, Json(req): Json<CreateSession>) -> ApiResult {
    Ok((StatusCode::CREATED, Json(svc.create(req)?)).into_response())
}

async fn next(State(svc): Shared, Path(id): Path<String>) -> ApiResult {
    Ok(Json(svc.next(&id)?).into_response())
}

async fn answer(State(svc): Shared, Path(id): Path<String>, Json(b): Json<AnswerBody>) -> ApiResult {
    Ok(Json(svc.answer(&id, b.answer, b.rt_ms)?).into_response())
}

async fn extend(State(svc): Shared, Path(id): Path<String>, body: Option<Json<ExtendBody>>) -> ApiResult {
    let extra = body.map(|Json(b)| b.extra).unwrap_or_default();
    let target = svc.extend_practice(&id, extra)?;
    Ok(Json(json!({ "practice_trials": target })).into_response())
}

async fn questionnaire(State(svc): Shared, Path(id): Path<String>, Json(b): Json<QuestionnaireBody>) -> ApiResult {
    let phase = svc.questionnaire(&id, b.attention, b.anxiety)?;
    Ok(Json(json!({ "phase": phase })).into_response())
}

async fn export(State(svc): Shared, Path(id): Path<String>) -> ApiResult {
    Ok(Json(svc.export(&id)?).into_response())
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/extend-practice", post(extend))
        .route("/sessions/{id}/questionnaire", post(questionnaire))
        .route("/sessions/{id}/export", get(export))
        .with_state(svc)
}

/// Serves until the listener fails.
pub async fn serve(svc: Arc<Service>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).await
}
