//! HTTP facade over one interactive experiment session.
//!
//! | method | path                   | body                          |
//! |--------|------------------------|-------------------------------|
//! | POST   | `/session`             | experiment config             |
//! | GET    | `/session/{id}/batch`  |                               |
//! | POST   | `/session/{id}/labels` | `{"labels": {index: class}}`  |
//! | GET    | `/session/{id}/metrics`|                               |
//!
//! The experiment runs on its own thread and blocks in an
//! [`InteractiveOracle`] until the labels of each batch have been posted.

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use waal_core::experiment::Event;
use waal_core::metrics::MetricsWriter;
use waal_core::oracle::{InteractiveOracle, LabelDesk, OracleError, Phase, SubmitError};
use waal_core::{Error, Experiment, ExperimentConfig, RoundRecord};

#[derive(Clone, Debug, Default)]
pub struct ServerOptions {
    /// Directory against which relative dataset and metrics paths resolve.
    pub base_dir: Option<PathBuf>,
    /// Overrides the config's `out_path` for the metrics log.
    pub metrics_path: Option<PathBuf>,
    /// Re-run a round whose labels timed out instead of ending the session.
    /// Labels already received for the re-published batch are kept.
    pub retry_on_timeout: bool,
}

#[derive(Debug)]
pub enum CreateError {
    Invalid { field: String, message: String },
    Busy,
}

impl std::fmt::Display for CreateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CreateError::Invalid { field, message } => write!(f, "{field}: {message}"),
            CreateError::Busy => f.write_str("a session is already active"),
        }
    }
}

impl std::error::Error for CreateError {}

impl From<Error> for CreateError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { field, message } => CreateError::Invalid { field, message },
            Error::Budget { .. } => CreateError::Invalid {
                field: "budget".into(),
                message: e.to_string(),
            },
            other => CreateError::Invalid {
                field: "dataset".into(),
                message: other.to_string(),
            },
        }
    }
}

type SessionResult = waal_core::Result<Vec<RoundRecord>>;

#[derive(Debug)]
struct Session {
    id: String,
    desk: Arc<LabelDesk>,
    runner: Option<JoinHandle<SessionResult>>,
}

/// Single-session label server.
#[derive(Clone, Debug, Default)]
pub struct LabServer {
    session: Arc<Mutex<Option<Session>>>,
    options: Arc<ServerOptions>,
}

impl LabServer {
    pub fn new(options: ServerOptions) -> Self {
        Self {
            session: Arc::default(),
            options: Arc::new(options),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Option<Session>> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Starts a session for the first seed of `config`. Fails with
    /// [`CreateError::Busy`] while another session has not finished.
    pub fn create_session(&self, config: ExperimentConfig) -> Result<String, CreateError> {
        let mut slot = self.lock();
        if slot.as_ref().is_some_and(|s| s.desk.snapshot().phase != Phase::Done) {
            return Err(CreateError::Busy);
        }
        let seed = config.seeds[0];
        if config.seeds.len() > 1 {
            log::warn!("interactive sessions run the first seed only ({seed})");
        }
        let base_dir = self.options.base_dir.as_deref();
        let mut exp = Experiment::new(&config, seed, base_dir)?;
        exp.pool_mut().hide_unlabeled();
        let metrics_path = self
            .options
            .metrics_path
            .clone()
            .or_else(|| config.out_path.clone())
            .map(|p| match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            });
        let mut writer = metrics_path
            .map(MetricsWriter::create)
            .transpose()
            .map_err(|e| CreateError::Invalid {
                field: "out_path".into(),
                message: e.to_string(),
            })?;

        let desk = Arc::new(LabelDesk::new(exp.pool().num_classes()));
        let id = uuid::Uuid::new_v4().simple().to_string();
        let timeout = config.oracle_timeout_secs.map(Duration::from_secs_f64);
        let retry = self.options.retry_on_timeout;
        let runner = {
            let desk = desk.clone();
            std::thread::Builder::new()
                .name("waal-session".into())
                .spawn(move || {
                    let mut oracle = InteractiveOracle::new(desk.clone(), timeout);
                    let result = drive(&mut exp, &mut oracle, &desk, &mut writer, retry);
                    desk.finish(result.as_ref().err().map(|e| e.to_string()));
                    result
                })
                .map_err(|e| CreateError::Invalid {
                    field: "session".into(),
                    message: e.to_string(),
                })?
        };
        log::info!("session {id} started (seed {seed})");
        *slot = Some(Session {
            id: id.clone(),
            desk,
            runner: Some(runner),
        });
        Ok(id)
    }

    /// The label desk of session `id`, if it exists.
    pub fn desk(&self, id: &str) -> Option<Arc<LabelDesk>> {
        self.lock().as_ref().filter(|s| s.id == id).map(|s| s.desk.clone())
    }

    /// Blocks until the current session's experiment thread ends.
    pub fn join(&self) -> Option<SessionResult> {
        let runner = self.lock().as_mut().and_then(|s| s.runner.take())?;
        Some(runner.join().unwrap_or_else(|_| {
            Err(Error::Precondition("session thread panicked".into()))
        }))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/session", post(create_session))
            .route("/session/{id}/batch", get(batch))
            .route("/session/{id}/labels", post(submit_labels))
            .route("/session/{id}/metrics", get(metrics))
            .layer(CorsLayer::permissive())
            .with_state(self.clone())
    }
}

fn drive(
    exp: &mut Experiment,
    oracle: &mut InteractiveOracle,
    desk: &LabelDesk,
    writer: &mut Option<MetricsWriter>,
    retry_on_timeout: bool,
) -> SessionResult {
    let mut write_error = None;
    loop {
        let mut observer = |event: Event| match event {
            Event::RoundStarted { round } => desk.begin_round(round),
            Event::Epoch { epoch, epochs, .. } => desk.set_progress((epoch + 1) as f64 / epochs as f64),
            Event::Record(record) => {
                if let Some(w) = writer.as_mut() {
                    if let Err(e) = w.write(record) {
                        write_error.get_or_insert(e);
                    }
                }
                desk.push_record(record.clone());
            }
        };
        match exp.run_round(oracle, &mut observer) {
            Ok(Some(_)) => {}
            Ok(None) => break,
            Err(Error::Oracle(OracleError::Timeout { seconds })) if retry_on_timeout => {
                log::warn!("no labels after {seconds} s; re-publishing the batch");
            }
            Err(e) => return Err(e),
        }
        if let Some(e) = write_error.take() {
            return Err(e);
        }
    }
    Ok(exp.records().to_vec())
}

/// Serves `server` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    server: LabServer,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, server.router())
        .with_graceful_shutdown(shutdown)
        .await
}

fn error(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

fn unknown_session(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, json!({ "error": format!("unknown session {id}") }))
}

async fn create_session(State(server): State<LabServer>, body: Bytes) -> Response {
    let parsed = std::str::from_utf8(&body)
        .map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })
        .and_then(ExperimentConfig::from_json_str);
    let config = match parsed {
        Ok(c) => c,
        Err(e) => {
            let field = match &e {
                Error::Config { field, .. } => field.clone(),
                _ => "config".into(),
            };
            return error(StatusCode::BAD_REQUEST, json!({ "error": e.to_string(), "field": field }));
        }
    };
    // dataset loading and the initial split can take a moment
    match tokio::task::spawn_blocking(move || server.create_session(config)).await {
        Ok(Ok(id)) => (StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response(),
        Ok(Err(CreateError::Busy)) => error(StatusCode::CONFLICT, json!({ "error": "a session is already active" })),
        Ok(Err(CreateError::Invalid { field, message })) => error(
            StatusCode::BAD_REQUEST,
            json!({ "error": format!("{field}: {message}"), "field": field }),
        ),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() })),
    }
}

async fn batch(State(server): State<LabServer>, Path(id): Path<String>) -> Response {
    let Some(desk) = server.desk(&id) else {
        return unknown_session(&id);
    };
    let s = desk.snapshot();
    let body = match s.phase {
        Phase::AwaitingLabels => json!({
            "phase": s.phase,
            "round": s.round,
            "items": s.pending,
            "received": s.received,
        }),
        Phase::Training => json!({ "phase": s.phase, "round": s.round, "progress": s.progress }),
        Phase::Done => json!({ "phase": s.phase, "rounds_completed": s.history.len(), "error": s.error }),
    };
    Json(body).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsBody {
    labels: BTreeMap<usize, usize>,
}

async fn submit_labels(State(server): State<LabServer>, Path(id): Path<String>, body: Bytes) -> Response {
    let Some(desk) = server.desk(&id) else {
        return unknown_session(&id);
    };
    let labels = match serde_json::from_slice::<LabelsBody>(&body) {
        Ok(b) => b.labels,
        Err(e) => return error(StatusCode::BAD_REQUEST, json!({ "error": e.to_string() })),
    };
    match desk.submit(&labels) {
        Ok(outcome) => Json(outcome).into_response(),
        Err(e) => {
            let (status, index) = match e {
                SubmitError::NotPending { index } | SubmitError::ClassOutOfRange { index, .. } => {
                    (StatusCode::UNPROCESSABLE_ENTITY, index)
                }
                SubmitError::Conflict { index, .. } => (StatusCode::CONFLICT, index),
            };
            error(status, json!({ "error": e.to_string(), "index": index }))
        }
    }
}

async fn metrics(State(server): State<LabServer>, Path(id): Path<String>) -> Response {
    match server.desk(&id) {
        Some(desk) => Json(desk.snapshot().history).into_response(),
        None => unknown_session(&id),
    }
}
