//! HTTP + JSON front end for the experiment service.
//!
//! Every mutation goes through one mutex-guarded [`Experiment`]; story
//! generation for a submission happens between a prepare and a commit with
//! the lock released.

use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use infill_core::experiment::{Experiment, ExperimentError, StoryTeller, SubmitRequest};
use serde::Deserialize;
use serde_json::json;

#[derive(Clone)]
pub struct AppState {
    experiment: Arc<Mutex<Experiment>>,
    teller: Arc<dyn StoryTeller>,
}

impl AppState {
    pub fn new(experiment: Experiment, teller: Arc<dyn StoryTeller>) -> Self {
        Self { experiment: Arc::new(Mutex::new(experiment)), teller }
    }

    fn lock(&self) -> MutexGuard<'_, Experiment> {
        // A panic mid-request leaves the state as of the last applied event.
        self.experiment.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/prompts", get(session_prompts))
        .route("/sessions/{id}/prompts/{pid}/examples", get(examples))
        .route("/sessions/{id}/prompts/{pid}/sentences", post(submit_sentences))
        .route("/judgments/tasks", post(judgment_task))
        // Group ids embed the block id, which contains a slash.
        .route("/judgments/{*group_id}", post(submit_judgment))
        .route("/export/blocks", get(export_blocks))
        .route("/export/responses", get(export_responses))
        .with_state(state)
}

pub struct ApiError(ExperimentError);

impl From<ExperimentError> for ApiError {
    fn from(e: ExperimentError) -> Self {
        Self(e)
    }
}

/// Status and stable error code for each failure.
pub fn classify(e: &ExperimentError) -> (StatusCode, &'static str) {
    use ExperimentError::*;
    match e {
        UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
        UnknownPrompt { .. } => (StatusCode::NOT_FOUND, "unknown_prompt"),
        UnknownGroup(_) => (StatusCode::NOT_FOUND, "unknown_group"),
        DuplicateAuthor(_) => (StatusCode::CONFLICT, "duplicate_author"),
        PoolExhausted { .. } => (StatusCode::CONFLICT, "pool_exhausted"),
        WrongStage { .. } => (StatusCode::CONFLICT, "wrong_stage"),
        AlreadySubmitted { .. } => (StatusCode::CONFLICT, "already_submitted"),
        DoubleSubmission { .. } => (StatusCode::CONFLICT, "double_submission"),
        NoBlocks => (StatusCode::CONFLICT, "no_blocks"),
        NoJudgmentWork => (StatusCode::CONFLICT, "no_judgment_work"),
        ExamplesHidden => (StatusCode::FORBIDDEN, "examples_hidden"),
        NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
        Rejected(_) => (StatusCode::UNPROCESSABLE_ENTITY, "rejected"),
        WrongSentenceCount(_) => (StatusCode::BAD_REQUEST, "wrong_sentence_count"),
        InvalidChoice(_) => (StatusCode::BAD_REQUEST, "invalid_choice"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = classify(&self.0);
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %self.0, "request failed");
        }
        let mut body = json!({ "error": code, "message": self.0.to_string() });
        if let ExperimentError::Rejected(verdicts) = &self.0 {
            body["verdicts"] = json!(verdicts);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok<T: serde::Serialize>(value: T) -> ApiResult {
    Ok(Json(value).into_response())
}

#[derive(Deserialize)]
struct CreateSession {
    author_id: String,
}

async fn create_session(State(s): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult {
    let view = s.lock().create_session(&req.author_id)?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn session_prompts(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.lock().session(&id)?)
}

async fn examples(State(s): State<AppState>, Path((id, pid)): Path<(String, String)>) -> ApiResult {
    ok(s.lock().examples(&id, &pid)?)
}

async fn submit_sentences(
    State(s): State<AppState>,
    Path((id, pid)): Path<(String, String)>,
    Json(req): Json<SubmitRequest>,
) -> ApiResult {
    let pending = s.lock().prepare_submission(&id, &pid, &req)?;
    let teller = s.teller.clone();
    let (pending, feedback) = tokio::task::spawn_blocking(move || {
        let feedback = pending.tell(teller.as_ref());
        (pending, feedback)
    })
    .await
    .map_err(|e| ExperimentError::Feedback(e.to_string()))?;
    let response = s.lock().commit_submission(pending, feedback?)?;
    ok(response)
}

#[derive(Deserialize)]
struct TaskRequest {
    rater_id: String,
}

async fn judgment_task(State(s): State<AppState>, Json(req): Json<TaskRequest>) -> ApiResult {
    ok(s.lock().judgment_task(&req.rater_id)?)
}

#[derive(Deserialize)]
struct JudgmentRequest {
    rater_id: String,
    choice: usize,
}

async fn submit_judgment(
    State(s): State<AppState>,
    Path(group_id): Path<String>,
    Json(req): Json<JudgmentRequest>,
) -> ApiResult {
    s.lock().submit_judgment(&req.rater_id, &group_id, req.choice)?;
    ok(json!({ "status": "recorded", "group_id": group_id, "rater_id": req.rater_id }))
}

async fn export_blocks(State(s): State<AppState>) -> ApiResult {
    ok(s.lock().export_blocks())
}

async fn export_responses(State(s): State<AppState>) -> ApiResult {
    ok(s.lock().export_responses())
}
