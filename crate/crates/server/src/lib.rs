//! Support server and console service.
//!
//! One axum application exposes the identification endpoints used by devices
//! (`/api/v1/identify`, `/enroll`, `/sync`) and the console extras that host a
//! [`Pipeline`] (`/detect`, `/state`, `/frame`, `/enrolment/complete`,
//! `/events`).

pub mod api;
pub mod remote;
pub mod service;

use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facekit::cascade::{detect, load_cascade, CascadeError, CascadeModel, DetectParams};
use facekit::facestore::{FaceStore, SharedStore, StoreConfig, StoreError};
use facekit::imaging::PgmError;
use facekit::lbph::LbpParams;
use facekit::pipeline::{EventKind, Pipeline, PipelineConfig, PipelineError, PipelineEvent, RemoteRecognizer};
use facekit::now_millis;
use serde::de::DeserializeOwned;
use thiserror::Error;
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use crate::api::{
    CompleteEnrolmentRequest, DetectResponse, EnrollRequest, EnrollResponse, ErrorBody, FrameRequest,
    ImageDecodeError, ImageRequest, StateRequest, StateResponse,
};
use crate::remote::HttpRemote;
use crate::service::StoreRemote;

const EVENT_BUFFER: usize = 256;
const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("face store: {0}")]
    Store(#[from] StoreError),
    #[error("cascade {path}: {source}")]
    Cascade { path: PathBuf, source: CascadeError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub store: StoreConfig,
    /// Detection endpoints answer 503 without a cascade.
    pub cascade_path: Option<PathBuf>,
    /// With `server_endpoint` set, the pipeline's online recognition goes to
    /// that server instead of the local store.
    pub pipeline: PipelineConfig,
    pub probe_interval: Duration,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    store: SharedStore,
    cascade: Option<Arc<CascadeModel>>,
    pipeline: Option<Mutex<Pipeline>>,
    events: broadcast::Sender<PipelineEvent>,
    lbp_params: LbpParams,
    detect_params: DetectParams,
}

impl AppState {
    /// Without a `remote`, the pipeline's online mode is served from `store`.
    pub fn new(
        store: SharedStore,
        cascade: Option<Arc<CascadeModel>>,
        pipeline_config: PipelineConfig,
        remote: Option<Box<dyn RemoteRecognizer>>,
    ) -> Self {
        let lbp_params = pipeline_config.lbp_params.clone();
        let detect_params = pipeline_config.detect_params.clone();
        let pipeline = cascade.as_ref().map(|c| {
            let remote = remote.unwrap_or_else(|| Box::new(StoreRemote::new(Arc::clone(&store), lbp_params.clone())));
            Mutex::new(
                Pipeline::new(pipeline_config, Arc::clone(c))
                    .with_store(Arc::clone(&store))
                    .with_remote(remote),
            )
        });
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        AppState {
            inner: Arc::new(Inner {
                store,
                cascade,
                pipeline,
                events,
                lbp_params,
                detect_params,
            }),
        }
    }

    /// Opens the store and cascade named by `config`.
    pub fn open(config: &ServerConfig) -> Result<Self, ServerError> {
        let store = Arc::new(Mutex::new(FaceStore::open(config.store.clone())?));
        let cascade = match &config.cascade_path {
            Some(path) => {
                let bytes = std::fs::read(path)?;
                let model = load_cascade(&bytes).map_err(|source| ServerError::Cascade {
                    path: path.clone(),
                    source,
                })?;
                Some(Arc::new(model))
            }
            None => None,
        };
        let remote = config.pipeline.server_endpoint.as_ref().map(|url| {
            Box::new(HttpRemote::new(url.clone(), config.pipeline.server_timeout())) as Box<dyn RemoteRecognizer>
        });
        Ok(AppState::new(store, cascade, config.pipeline.clone(), remote))
    }

    pub fn store(&self) -> &SharedStore {
        &self.inner.store
    }

    pub fn subscribe(&self) -> broadcast::Receiver<PipelineEvent> {
        self.inner.events.subscribe()
    }

    fn publish(&self, events: &[PipelineEvent]) {
        for e in events {
            // No subscribers is not an error.
            let _ = self.inner.events.send(e.clone());
        }
    }

    /// Flips the pipeline between offline and online according to `reachable`.
    pub fn apply_connectivity(&self, reachable: bool) {
        if let Some(p) = &self.inner.pipeline {
            let event = p
                .lock()
                .expect("pipeline lock poisoned")
                .check_connectivity(|| reachable, now_millis());
            if let Some(e) = event {
                self.publish(&[e]);
            }
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/api/v1/identify", post(identify))
        .route("/api/v1/enroll", post(enroll))
        .route("/api/v1/sync", get(sync))
        .route("/api/v1/detect", post(detect_faces))
        .route("/api/v1/state", get(get_state).post(set_state))
        .route("/api/v1/frame", post(frame))
        .route("/api/v1/enrolment/complete", post(complete_enrolment))
        .route("/api/v1/events", get(events))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until ctrl-c. With a server endpoint configured, reachability is probed
/// periodically and drives the pipeline's offline/online mode.
pub async fn run(config: ServerConfig) -> Result<(), ServerError> {
    let state = AppState::open(&config)?;
    if let Some(url) = config.pipeline.server_endpoint.clone() {
        let state = state.clone();
        let timeout = config.pipeline.server_timeout();
        let mut ticker = tokio::time::interval(config.probe_interval);
        tokio::spawn(async move {
            let probe = Arc::new(HttpRemote::new(url, timeout));
            loop {
                ticker.tick().await;
                let (state, probe) = (state.clone(), Arc::clone(&probe));
                let _ = tokio::task::spawn_blocking(move || state.apply_connectivity(probe.probe())).await;
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

/// Serves `state` on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<ImageDecodeError> for ApiError {
    fn from(e: ImageDecodeError) -> Self {
        let status = match e {
            ImageDecodeError::Pgm(PgmError::InvalidDimensions(..)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::EmptyName => StatusCode::BAD_REQUEST,
            StoreError::UnknownPerson(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<CascadeError> for ApiError {
    fn from(e: CascadeError) -> Self {
        let status = match e {
            CascadeError::ImageTooSmall { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NotEnrolling | PipelineError::UnknownCapture(_) => {
                ApiError::new(StatusCode::CONFLICT, e.to_string())
            }
            PipelineError::EmptyName => ApiError::bad_request(e.to_string()),
            PipelineError::NoStore(_) | PipelineError::NoServer => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
            }
            PipelineError::Detection(c) => c.into(),
            PipelineError::Store(s) => s.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn no_cascade() -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no cascade configured")
}

async fn identify(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: ImageRequest = parse(&body)?;
    let face = req.image.decode()?;
    let answer = blocking(move || {
        let mut store = state.inner.store.lock().expect("face store lock poisoned");
        Ok(service::identify(&mut store, &face, &state.inner.lbp_params, now_millis())?)
    })
    .await?;
    Ok(Json(answer))
}

async fn enroll(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: EnrollRequest = parse(&body)?;
    if req.display_name.trim().is_empty() {
        return Err(ApiError::bad_request("displayName must not be empty"));
    }
    let face = req.image.decode()?;
    let record = blocking(move || {
        let mut store = state.inner.store.lock().expect("face store lock poisoned");
        Ok(store.enroll(&req.display_name, &req.notes, &face, now_millis())?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(EnrollResponse { person_id: record.id })))
}

async fn sync(
    State(state): State<AppState>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<impl IntoResponse, ApiError> {
    let limit = match query.get("limit") {
        None => None,
        Some(raw) => match raw.parse::<i64>() {
            Ok(k) if k >= 1 => Some(k as usize),
            _ => return Err(ApiError::bad_request("limit must be an integer >= 1")),
        },
    };
    let answer = blocking(move || {
        let store = state.inner.store.lock().expect("face store lock poisoned");
        let limit = limit.unwrap_or_else(|| store.capacity());
        Ok(service::sync(&store, limit)?)
    })
    .await?;
    Ok(Json(answer))
}

async fn detect_faces(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: ImageRequest = parse(&body)?;
    let img = req.image.decode()?;
    let cascade = state.inner.cascade.clone().ok_or_else(no_cascade)?;
    let boxes = blocking(move || Ok(detect(&cascade, &img, &state.inner.detect_params)?)).await?;
    Ok(Json(DetectResponse { boxes }))
}

fn state_of(p: &Pipeline) -> StateResponse {
    let s = p.state();
    StateResponse {
        mode: s.mode,
        last_detection_at: s.last_detection_at,
        pending_capture: p.pending_capture().map(str::to_string),
    }
}

async fn get_state(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    let p = state.inner.pipeline.as_ref().ok_or_else(no_cascade)?;
    let s = state_of(&p.lock().expect("pipeline lock poisoned"));
    Ok(Json(s))
}

async fn set_state(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: StateRequest = parse(&body)?;
    if state.inner.pipeline.is_none() {
        return Err(no_cascade());
    }
    let answer = blocking(move || {
        let p = state.inner.pipeline.as_ref().expect("checked above");
        let mut p = p.lock().expect("pipeline lock poisoned");
        let event = p.set_mode(req.mode, now_millis());
        state.publish(&[event]);
        Ok(state_of(&p))
    })
    .await?;
    Ok(Json(answer))
}

async fn frame(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: FrameRequest = parse(&body)?;
    let img = req.image.decode()?;
    if state.inner.pipeline.is_none() {
        return Err(no_cascade());
    }
    let events = blocking(move || {
        let p = state.inner.pipeline.as_ref().expect("checked above");
        let events = p
            .lock()
            .expect("pipeline lock poisoned")
            .process_frame(&img, req.now.unwrap_or_else(now_millis))?;
        state.publish(&events);
        Ok(events)
    })
    .await?;
    Ok(Json(events))
}

async fn complete_enrolment(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CompleteEnrolmentRequest = parse(&body)?;
    if state.inner.pipeline.is_none() {
        return Err(no_cascade());
    }
    let event = blocking(move || {
        let p = state.inner.pipeline.as_ref().expect("checked above");
        let now = req.now.unwrap_or_else(now_millis);
        let outcome = p
            .lock()
            .expect("pipeline lock poisoned")
            .complete_enrolment(&req.temp_ref, &req.display_name, &req.notes, now);
        match outcome {
            Ok(event) => {
                state.publish(std::slice::from_ref(&event));
                Ok(event)
            }
            Err(e) => {
                state.publish(&[PipelineEvent {
                    at: now,
                    kind: EventKind::Error { message: e.to_string() },
                }]);
                Err(e.into())
            }
        }
    })
    .await?;
    Ok(Json(event))
}

async fn events(State(state): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = BroadcastStream::new(state.subscribe()).filter_map(|msg| {
        let event = msg.ok()?;
        Some(Ok(Event::default().json_data(&event).expect("events serialize")))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
