//! HTTP/JSON front end. Every handler is a thin adapter over an
//! [`EngineState`] operation; responses are the operation's result with a
//! `revision` field added.
//!
//! Reads clone an `Arc` of the current session and never wait on writers.
//! Mutations go through a single async mutex, copy the state, apply the
//! change, bump the revision and publish the new session.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use foke_core::embedding::EpochLoss;
use foke_core::engine::RetrieveQuery;
use foke_core::prompt::TaskSpec;
use foke_core::store::{self, TreeDocument};
use foke_core::{EngineState, Error, SimConfig, TrainConfig, TreeId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Engine state plus the revision it was published at.
#[derive(Debug, Clone)]
pub struct Session {
    pub state: EngineState,
    pub revision: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainJob {
    pub job: u64,
    pub status: JobStatus,
    pub config: TrainConfig,
    pub history: Vec<EpochLoss>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

pub struct AppState {
    session: RwLock<Arc<Session>>,
    writer: tokio::sync::Mutex<()>,
    training: Mutex<Option<u64>>,
    jobs: Mutex<BTreeMap<u64, TrainJob>>,
    next_job: AtomicU64,
    snapshot_path: Option<PathBuf>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(state: EngineState, snapshot_path: Option<PathBuf>) -> SharedState {
        Arc::new(AppState {
            session: RwLock::new(Arc::new(Session { state, revision: 0 })),
            writer: tokio::sync::Mutex::new(()),
            training: Mutex::new(None),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            snapshot_path,
        })
    }

    pub fn current(&self) -> Arc<Session> {
        self.session.read().expect("session lock poisoned").clone()
    }

    fn publish(&self, state: EngineState, revision: u64) {
        *self.session.write().expect("session lock poisoned") = Arc::new(Session { state, revision });
    }

    /// Applies `f` to a copy of the state and publishes the result under
    /// the next revision. Fails with 409 while a training job runs.
    async fn mutate<T>(&self, f: impl FnOnce(&mut EngineState) -> foke_core::Result<T>) -> Result<(T, u64), ApiError> {
        let _guard = self.writer.lock().await;
        if let Some(job) = *self.training.lock().expect("training lock poisoned") {
            return Err(ApiError::busy(job));
        }
        let current = self.current();
        let mut state = current.state.clone();
        let out = f(&mut state)?;
        let revision = current.revision + 1;
        self.publish(state, revision);
        Ok((out, revision))
    }

    pub fn job(&self, id: u64) -> Option<TrainJob> {
        self.jobs.lock().expect("jobs lock poisoned").get(&id).cloned()
    }

    /// Writes the current session to the snapshot path, if any. Returns the
    /// revision written.
    pub fn save(&self) -> std::io::Result<Option<u64>> {
        let Some(path) = &self.snapshot_path else {
            return Ok(None);
        };
        let session = self.current();
        store::write_atomic(path, &store::save_snapshot(&session.state))?;
        Ok(Some(session.revision))
    }
}

/// Saves whenever the revision has moved since the last save.
pub async fn autosave(state: SharedState, every: Duration) {
    let mut saved = state.current().revision;
    let mut tick = tokio::time::interval(every);
    tick.tick().await;
    loop {
        tick.tick().await;
        if state.current().revision == saved {
            continue;
        }
        match state.save() {
            Ok(Some(rev)) => {
                tracing::info!(revision = rev, "snapshot saved");
                saved = rev;
            }
            Ok(None) => return,
            Err(e) => tracing::error!(error = %e, "autosave failed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn busy(job: u64) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            body: ErrorBody {
                code: "training_in_progress".into(),
                message: format!("training job {job} is running; mutations are locked"),
                detail: json!({ "job": job }),
            },
        }
    }

    fn bad_request(code: &str, message: String) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                code: code.into(),
                message,
                detail: Value::Null,
            },
        }
    }

    fn not_found(code: &str, message: String) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            body: ErrorBody {
                code: code.into(),
                message,
                detail: Value::Null,
            },
        }
    }
}

/// Machine-readable extras for the error variants that carry them.
fn error_detail(e: &Error) -> Value {
    match e {
        Error::Template { template, source } => json!({ "template": template, "cause": source.code() }),
        Error::Document { location, .. } => json!({ "location": location }),
        Error::DimensionMismatch { expected, found } => json!({ "expected": expected, "found": found }),
        Error::IndexOutOfRange { index, len } => json!({ "index": index, "len": len }),
        Error::OutOfRange { name, value, range } => json!({ "name": name, "value": value, "range": range }),
        Error::Diverged { epoch } => json!({ "epoch": epoch }),
        _ => Value::Null,
    }
}

pub fn error_body(e: &Error) -> ErrorBody {
    ErrorBody {
        code: e.code().into(),
        message: e.to_string(),
        detail: error_detail(e),
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_not_found() {
            StatusCode::NOT_FOUND
        } else {
            StatusCode::BAD_REQUEST
        };
        ApiError {
            status,
            body: error_body(&e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// JSON body of a library result with the observed revision merged in.
pub fn with_revision<T: Serialize>(value: &T, revision: u64) -> Value {
    let mut v = serde_json::to_value(value).expect("results serialize to JSON");
    match &mut v {
        Value::Object(map) => {
            map.insert("revision".into(), json!(revision));
            v
        }
        _ => json!({ "revision": revision, "result": v }),
    }
}

fn reply<T: Serialize>(value: &T, revision: u64) -> Response {
    Json(with_revision(value, revision)).into_response()
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_request", e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub query: RetrieveQuery,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub user_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasteryRequest {
    pub user_id: String,
    pub tree: usize,
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRequest {
    pub task: TaskSpec,
    #[serde(default)]
    pub template_ids: Vec<String>,
    #[serde(default)]
    pub user_id: Option<String>,
}

/// Simulation settings; `delta` falls back to the engine default and the
/// rest to [`SimConfig::default`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    #[serde(default)]
    pub user_id: Option<String>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub mastery_goal: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SimulateRequest {
    pub fn config(&self, default_delta: f64) -> SimConfig {
        let d = SimConfig::default();
        SimConfig {
            delta: self.delta.unwrap_or(default_delta),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            mastery_goal: self.mastery_goal.unwrap_or(d.mastery_goal),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/forest", get(get_forest))
        .route("/trees", post(post_tree))
        .route("/trees/{id}", delete(delete_tree))
        .route("/train", post(post_train))
        .route("/train/{job}", get(get_train))
        .route("/retrieve", post(post_retrieve))
        .route("/recommend", post(post_recommend))
        .route("/mastery", post(post_mastery))
        .route("/prompt", post(post_prompt))
        .route("/simulate", post(post_simulate))
        .fallback(|| async { ApiError::not_found("no_route", "no such endpoint".into()) })
        .with_state(state)
}

async fn get_forest(State(app): State<SharedState>) -> Response {
    let s = app.current();
    reply(&s.state.summary(), s.revision)
}

async fn post_tree(State(app): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let doc: TreeDocument = parse_body(&body)?;
    let (inserted, rev) = app.mutate(|st| st.insert_tree(&doc)).await?;
    Ok((StatusCode::CREATED, Json(with_revision(&inserted, rev))).into_response())
}

async fn delete_tree(State(app): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = TreeId::new(id);
    let (removed, rev) = app.mutate(|st| st.remove_tree(&id)).await?;
    Ok(reply(&removed, rev))
}

async fn post_train(State(app): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let config: TrainConfig = if body.iter().all(u8::is_ascii_whitespace) {
        app.current().state.config.train.clone()
    } else {
        parse_body(&body)?
    };
    config.validate()?;

    let _guard = app.writer.lock().await;
    let job = {
        let mut training = app.training.lock().expect("training lock poisoned");
        if let Some(running) = *training {
            return Err(ApiError::busy(running));
        }
        let job = app.next_job.fetch_add(1, Ordering::SeqCst);
        *training = Some(job);
        job
    };
    app.jobs.lock().expect("jobs lock poisoned").insert(
        job,
        TrainJob {
            job,
            status: JobStatus::Running,
            config: config.clone(),
            history: Vec::new(),
            error: None,
        },
    );
    let revision = app.current().revision;
    tokio::spawn(run_training(app.clone(), job, config));
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": job, "revision": revision }))).into_response())
}

async fn run_training(app: SharedState, job: u64, config: TrainConfig) {
    let snapshot = app.current();
    let worker = app.clone();
    let cfg = config.clone();
    let result = tokio::task::spawn_blocking(move || {
        snapshot.state.train(&cfg, |epoch| {
            if let Some(j) = worker.jobs.lock().expect("jobs lock poisoned").get_mut(&job) {
                j.history.push(*epoch);
            }
        })
    })
    .await;

    let _guard = app.writer.lock().await;
    let outcome = match result {
        Ok(r) => r.map_err(|e| error_body(&e)),
        Err(e) => Err(ErrorBody {
            code: "internal".into(),
            message: format!("training task failed: {e}"),
            detail: Value::Null,
        }),
    };
    let status = match outcome {
        Ok(outcome) => {
            // Nothing else can mutate while the job runs, so the state the
            // job trained on is still current.
            let current = app.current();
            let mut state = current.state.clone();
            state.apply_training(config, outcome);
            app.publish(state, current.revision + 1);
            Ok(())
        }
        Err(body) => Err(body),
    };
    if let Some(j) = app.jobs.lock().expect("jobs lock poisoned").get_mut(&job) {
        match status {
            Ok(()) => j.status = JobStatus::Completed,
            Err(body) => {
                j.status = JobStatus::Failed;
                j.error = Some(body);
            }
        }
    }
    *app.training.lock().expect("training lock poisoned") = None;
}

async fn get_train(State(app): State<SharedState>, Path(job): Path<String>) -> Result<Response, ApiError> {
    let found = job.parse::<u64>().ok().and_then(|id| app.job(id));
    let job_state =
        found.ok_or_else(|| ApiError::not_found("job_not_found", format!("unknown training job `{job}`")))?;
    Ok(reply(&job_state, app.current().revision))
}

async fn post_retrieve(State(app): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let req: RetrieveRequest = parse_body(&body)?;
    let s = app.current();
    Ok(reply(&s.state.retrieve(&req.query)?, s.revision))
}

async fn post_recommend(State(app): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let req: RecommendRequest = parse_body(&body)?;
    let s = app.current();
    Ok(reply(&s.state.recommend(&req.user_id)?, s.revision))
}

async fn post_mastery(State(app): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let req: MasteryRequest = parse_body(&body)?;
    let (update, rev) = app
        .mutate(|st| st.update_mastery(&req.user_id, req.tree, req.delta))
        .await?;
    Ok(reply(&update, rev))
}

async fn post_prompt(State(app): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let req: PromptRequest = parse_body(&body)?;
    let s = app.current();
    let selection = s.state.prompt(&req.task, &req.template_ids, req.user_id.as_deref())?;
    Ok(reply(&selection, s.revision))
}

async fn post_simulate(State(app): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SimulateRequest = parse_body(&body)?;
    let s = app.current();
    let config = req.config(s.state.config.default_delta);
    Ok(reply(&s.state.simulate(&config, req.user_id.as_deref())?, s.revision))
}
