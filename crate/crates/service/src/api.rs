//! HTTP endpoints for human-annotated sessions.
//!
//! Outputs are shown blinded: for each example a secret per-session seed
//! decides whether model A appears on the left or the right, and labels are
//! translated back to model space before they reach the event log.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use diffuse_core::estimator::{Counts, Preference};
use diffuse_core::iterative::{IterativeError, SessionConfig, SessionEvent, SessionState, SessionStatus};
use diffuse_core::oracle::OutputRecord;
use diffuse_core::rng::derive_seed;
use diffuse_core::vectors::{pair_space, DifferenceSpace, EmbeddingMatrix, SpaceMode};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;

use crate::embed::{EmbedClient, EmbedError};
use crate::store::{now_ms, EventLog, ExampleText, Setup, Store, StoreError};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::internal(e)
    }
}

impl From<EmbedError> for ApiError {
    fn from(e: EmbedError) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Embeddings given inline as `{id, vector}` records or as a path on the
/// server.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EmbeddingSource {
    Path { path: PathBuf },
    Inline(Vec<InlineVector>),
}

#[derive(Debug, Clone, Deserialize)]
pub struct InlineVector {
    pub id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateRequest {
    #[serde(default)]
    pub outputs_a: Option<Vec<OutputRecord>>,
    #[serde(default)]
    pub outputs_b: Option<Vec<OutputRecord>>,
    #[serde(default)]
    pub embeddings_a: Option<EmbeddingSource>,
    #[serde(default)]
    pub embeddings_b: Option<EmbeddingSource>,
    #[serde(default)]
    pub mode: SpaceMode,
    pub config: SessionConfig,
    /// Fixes the left/right assignment; random when absent.
    #[serde(default)]
    pub blinding_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabelEntry {
    pub example_id: String,
    pub choice: Choice,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubmitRequest {
    pub seq: u64,
    pub labels: Vec<LabelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub example_id: String,
    pub input: String,
    pub output_left: String,
    pub output_right: String,
    pub side_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextBatch {
    pub seq: u64,
    pub status: SessionStatus,
    pub items: Vec<NextItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub status: SessionStatus,
    pub current_risk: f64,
    pub counts: Counts,
    pub annotated_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub winner: Option<Preference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusBody {
    pub session_id: String,
    #[serde(flatten)]
    pub progress: Progress,
    pub seq: u64,
    pub k: usize,
    pub pool_size: usize,
    pub pending: usize,
    pub config: SessionConfig,
    /// Model-space labels, revealed once the session has ended.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub annotations: Option<BTreeMap<String, Preference>>,
}

struct Session {
    setup: Setup,
    space: DifferenceSpace,
    state: SessionState,
    log: EventLog,
    /// Number of batches issued so far; the current batch is `batches - 1`.
    batches: u64,
}

impl Session {
    fn seq(&self) -> u64 {
        self.batches.saturating_sub(1)
    }

    fn record(&mut self, events: &[SessionEvent]) -> Result<(), StoreError> {
        self.log.append(events)?;
        self.batches += events
            .iter()
            .filter(|e| matches!(e, SessionEvent::BatchIssued { .. }))
            .count() as u64;
        Ok(())
    }

    fn progress(&self) -> Progress {
        Progress {
            status: self.state.status,
            current_risk: self.state.current_risk,
            counts: self.state.decision_counts(),
            annotated_count: self.state.annotated_count,
            winner: match self.state.status {
                SessionStatus::ConcludedWinnerA => Some(Preference::A),
                SessionStatus::ConcludedWinnerB => Some(Preference::B),
                _ => None,
            },
        }
    }

    fn status(&self) -> StatusBody {
        StatusBody {
            session_id: self.setup.id.clone(),
            progress: self.progress(),
            seq: self.seq(),
            k: self.state.k,
            pool_size: self.state.pool_size,
            pending: self.state.pending.len(),
            config: self.state.config.clone(),
            annotations: self.state.status.is_terminal().then(|| self.state.annotations.clone()),
        }
    }
}

/// True when model A is shown on the right for `id`.
pub fn swapped(blinding_seed: u64, id: &str) -> bool {
    derive_seed(blinding_seed, id, &[]) & 1 == 1
}

fn side_token(blinding_seed: u64, id: &str, seq: u64) -> String {
    format!("{:016x}", derive_seed(blinding_seed, id, &[seq, 0x5349_4445]))
}

pub struct AppState {
    store: Store,
    embed: Option<EmbedClient>,
    sessions: Mutex<HashMap<String, Arc<AsyncMutex<Session>>>>,
}

impl AppState {
    pub fn new(store: Store, embed: Option<EmbedClient>) -> Self {
        Self {
            store,
            embed,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn cached(&self, id: &str) -> Option<Arc<AsyncMutex<Session>>> {
        self.sessions.lock().expect("session map poisoned").get(id).cloned()
    }

    fn forget(&self, id: &str) {
        self.sessions.lock().expect("session map poisoned").remove(id);
    }

    /// The live session, reloading it from the store after a restart.
    async fn session(&self, id: &str) -> ApiResult<Arc<AsyncMutex<Session>>> {
        if let Some(s) = self.cached(id) {
            return Ok(s);
        }
        if uuid::Uuid::parse_str(id).is_err() || !self.store.exists(id) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no session {id:?}")));
        }
        let store = self.store.clone();
        let owned = id.to_string();
        let session = tokio::task::spawn_blocking(move || restore(&store, &owned))
            .await
            .map_err(ApiError::internal)??;
        let mut map = self.sessions.lock().expect("session map poisoned");
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(AsyncMutex::new(session)))
            .clone())
    }
}

fn restore(store: &Store, id: &str) -> ApiResult<Session> {
    let stored = store.load(id)?;
    let space =
        pair_space(&stored.embeddings_a, &stored.embeddings_b, stored.setup.mode).map_err(ApiError::internal)?;
    let mut state = SessionState::replay(&space, &stored.events).map_err(ApiError::internal)?;
    let batches = stored
        .events
        .iter()
        .filter(|e| matches!(e, SessionEvent::BatchIssued { .. }))
        .count() as u64;
    let mut session = Session {
        setup: stored.setup,
        space,
        state: state.clone(),
        log: stored.log,
        batches,
    };
    // a crash between ingesting labels and advancing leaves work to finish
    let events = state.settle(&session.space).map_err(ApiError::internal)?;
    session.state = state;
    session.record(&events)?;
    log::info!("restored session {id} at event {}", session.log.next_seq());
    Ok(session)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_batch))
        .route("/sessions/{id}/labels", post(submit_labels))
        .route("/sessions/{id}/status", get(session_status))
        .with_state(state)
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

async fn load_embeddings(
    side: &'static str,
    source: Option<EmbeddingSource>,
    outputs: Option<&Vec<OutputRecord>>,
    embed: Option<&EmbedClient>,
) -> ApiResult<EmbeddingMatrix> {
    match (source, outputs) {
        (Some(EmbeddingSource::Inline(records)), _) => {
            let (ids, rows) = records.into_iter().map(|r| (r.id, r.vector)).unzip();
            EmbeddingMatrix::new(ids, rows).map_err(|e| ApiError::bad_request(format!("embeddings_{side}: {e}")))
        }
        (Some(EmbeddingSource::Path { path }), _) => tokio::task::spawn_blocking(move || {
            let file = std::fs::File::open(&path)
                .map_err(|e| ApiError::bad_request(format!("embeddings_{side}: {}: {e}", path.display())))?;
            EmbeddingMatrix::read(std::io::BufReader::new(file))
                .map_err(|e| ApiError::bad_request(format!("embeddings_{side}: {}: {e}", path.display())))
        })
        .await
        .map_err(ApiError::internal)?,
        (None, Some(outputs)) => {
            let client = embed.ok_or_else(|| {
                ApiError::bad_request(format!(
                    "outputs_{side} given without embeddings and no embedding endpoint is configured"
                ))
            })?;
            let texts: Vec<(String, String)> = outputs.iter().map(|o| (o.id.clone(), o.output.clone())).collect();
            Ok(client.embed(&texts).await?)
        }
        (None, None) => Err(ApiError::bad_request(format!(
            "need embeddings_{side} or outputs_{side}"
        ))),
    }
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let request: CreateRequest = parse(&body)?;
    let a = load_embeddings(
        "a",
        request.embeddings_a,
        request.outputs_a.as_ref(),
        app.embed.as_ref(),
    )
    .await?;
    let b = load_embeddings(
        "b",
        request.embeddings_b,
        request.outputs_b.as_ref(),
        app.embed.as_ref(),
    )
    .await?;
    let space = pair_space(&a, &b, request.mode).map_err(|e| ApiError::bad_request(e.to_string()))?;

    let config = request.config;
    if space.len() < config.n_min || config.b_max > space.len() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "pool of {} cannot host n_min = {} and b_max = {}",
                space.len(),
                config.n_min,
                config.b_max
            ),
        ));
    }

    let mut texts: BTreeMap<String, ExampleText> = BTreeMap::new();
    for (outputs, is_a) in [(&request.outputs_a, true), (&request.outputs_b, false)] {
        for o in outputs.iter().flatten() {
            let t = texts.entry(o.id.clone()).or_default();
            if t.input.is_empty() {
                t.input = o.input.clone();
            }
            if is_a {
                t.output_a = o.output.clone();
            } else {
                t.output_b = o.output.clone();
            }
        }
    }
    texts.retain(|id, _| space.ids().contains(id));

    let id = uuid::Uuid::new_v4().to_string();
    let setup = Setup {
        id: id.clone(),
        created_ms: now_ms(),
        mode: request.mode,
        blinding_seed: request
            .blinding_seed
            .unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0),
        texts,
    };
    let store = app.store.clone();
    let session = tokio::task::spawn_blocking(move || -> ApiResult<Session> {
        let (state, events) = SessionState::start(&space, config).map_err(|e| match e {
            IterativeError::PoolTooSmall { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            IterativeError::InvalidConfig(_) => ApiError::bad_request(e.to_string()),
            other => ApiError::internal(other),
        })?;
        let log = store.create(&setup, &a, &b, &events)?;
        let batches = events
            .iter()
            .filter(|e| matches!(e, SessionEvent::BatchIssued { .. }))
            .count() as u64;
        Ok(Session {
            setup,
            space,
            state,
            log,
            batches,
        })
    })
    .await
    .map_err(ApiError::internal)??;
    app.sessions
        .lock()
        .expect("session map poisoned")
        .insert(id.clone(), Arc::new(AsyncMutex::new(session)));
    log::info!("created session {id}");
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))))
}

async fn next_batch(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<NextBatch>> {
    let session = app.session(&id).await?;
    let s = session.lock().await;
    let seq = s.seq();
    let seed = s.setup.blinding_seed;
    let items = s
        .state
        .pending
        .iter()
        .map(|ex| {
            let text = s.setup.texts.get(ex).cloned().unwrap_or_default();
            let (left, right) = if swapped(seed, ex) {
                (text.output_b, text.output_a)
            } else {
                (text.output_a, text.output_b)
            };
            NextItem {
                example_id: ex.clone(),
                input: text.input,
                output_left: left,
                output_right: right,
                side_token: side_token(seed, ex, seq),
            }
        })
        .collect();
    Ok(Json(NextBatch {
        seq,
        status: s.state.status,
        items,
    }))
}

async fn submit_labels(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Progress>> {
    let request: SubmitRequest = parse(&body)?;
    let session = app.session(&id).await?;
    let mut s = session.lock().await;
    if s.state.status.is_terminal() || request.seq != s.seq() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!(
                "batch {} is not open (current batch {}, status {:?})",
                request.seq,
                s.seq(),
                s.state.status
            ),
        ));
    }
    let seed = s.setup.blinding_seed;
    let mut labels = BTreeMap::new();
    for entry in request.labels {
        if !s.space.ids().contains(&entry.example_id) {
            return Err(ApiError::bad_request(format!("unknown example {:?}", entry.example_id)));
        }
        let flip = swapped(seed, &entry.example_id);
        let label = match (entry.choice, flip) {
            (Choice::Tie, _) => Preference::Tie,
            (Choice::Left, false) | (Choice::Right, true) => Preference::A,
            (Choice::Left, true) | (Choice::Right, false) => Preference::B,
        };
        if labels.insert(entry.example_id.clone(), label).is_some() {
            return Err(ApiError::bad_request(format!(
                "example {:?} labeled twice",
                entry.example_id
            )));
        }
    }
    let s = &mut *s;
    let events = match s.state.submit_labels(&s.space, &labels) {
        Ok(events) => events,
        Err(e @ (IterativeError::NotPending(_) | IterativeError::MissingLabel(_))) => {
            return Err(ApiError::bad_request(e.to_string()))
        }
        Err(e) => return Err(ApiError::internal(e)),
    };
    if let Err(e) = s.record(&events) {
        // memory is ahead of disk; reload from the log on the next request
        app.forget(&id);
        return Err(e.into());
    }
    Ok(Json(s.progress()))
}

async fn session_status(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<StatusBody>> {
    let session = app.session(&id).await?;
    let s = session.lock().await;
    Ok(Json(s.status()))
}

/// Serves `router` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
