//! Frame-processing state machine: detection cooldown, offline/online routing,
//! enrolment captures and the temporary-image lifecycle.
//!
//! Hosts feed frames together with a timestamp; the pipeline never reads a
//! clock or a camera itself.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{detect, CascadeError, CascadeModel, DetectParams};
use crate::facestore::{SharedStore, StoreError};
use crate::imaging::{crop, save_pgm, GrayImage, Rect};
use crate::lbph::LbpParams;
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Offline,
    Online,
    Enrolment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Via {
    Local,
    Server,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    FaceDetected {
        #[serde(rename = "box")]
        bounding_box: Rect,
    },
    #[serde(rename_all = "camelCase")]
    PersonIdentified {
        person_id: String,
        display_name: String,
        distance: f64,
        via: Via,
    },
    /// `distance` is absent when there was nothing to compare against.
    UnknownPerson { distance: Option<f64> },
    #[serde(rename_all = "camelCase")]
    EnrolmentCaptured { temp_image_ref: String },
    /// Confirmation that a pending capture was added to the face database.
    #[serde(rename_all = "camelCase")]
    PersonEnrolled {
        person_id: String,
        display_name: String,
        via: Via,
    },
    StateChanged { from: Mode, to: Mode },
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineConfig {
    pub cooldown_ms: u64,
    pub detect_params: DetectParams,
    pub lbp_params: LbpParams,
    pub server_endpoint: Option<String>,
    pub online_fallback: bool,
    pub server_timeout_ms: u64,
    pub temp_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cooldown_ms: 2000,
            detect_params: DetectParams::default(),
            lbp_params: LbpParams::default(),
            server_endpoint: None,
            online_fallback: true,
            server_timeout_ms: 3000,
            temp_dir: std::env::temp_dir().join("facekit-captures"),
        }
    }
}

impl PipelineConfig {
    pub fn server_timeout(&self) -> Duration {
        Duration::from_millis(self.server_timeout_ms)
    }
}

/// Answer from a remote identification service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RemoteMatch {
    pub person_id: String,
    pub display_name: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteIdentification {
    #[serde(rename = "match")]
    pub matched: Option<RemoteMatch>,
    pub distance: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RemoteError {
    /// The request never produced an answer (connection, timeout, I/O).
    #[error("transport failure: {0}")]
    Transport(String),
    /// The server answered but refused the request.
    #[error("server rejected request: {0}")]
    Rejected(String),
}

/// Where recognition goes when the pipeline is online.
pub trait RemoteRecognizer: Send + Sync {
    fn identify(&self, face: &GrayImage) -> Result<RemoteIdentification, RemoteError>;
    fn enroll(&self, display_name: &str, notes: &str, face: &GrayImage) -> Result<String, RemoteError>;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("mode {0:?} needs a local face store")]
    NoStore(Mode),
    #[error("online mode needs a server endpoint")]
    NoServer,
    #[error("enrolment can only be completed in Enrolment mode")]
    NotEnrolling,
    #[error("no pending capture named {0:?}")]
    UnknownCapture(String),
    #[error("display name must not be empty")]
    EmptyName,
    #[error(transparent)]
    Detection(#[from] CascadeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("temporary image: {0}")]
    TempImage(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineState {
    pub mode: Mode,
    pub last_detection_at: Option<Timestamp>,
}

struct PendingCapture {
    name: String,
    path: PathBuf,
    face: GrayImage,
}

pub struct Pipeline {
    config: PipelineConfig,
    cascade: Arc<CascadeModel>,
    store: Option<SharedStore>,
    remote: Option<Box<dyn RemoteRecognizer>>,
    mode: Mode,
    // Mode that was active before entering Enrolment.
    enrol_backing: Mode,
    last_detection_at: Option<Timestamp>,
    last_event_at: Option<Timestamp>,
    pending: Option<PendingCapture>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, cascade: Arc<CascadeModel>) -> Self {
        Pipeline {
            config,
            cascade,
            store: None,
            remote: None,
            mode: Mode::Offline,
            enrol_backing: Mode::Offline,
            last_detection_at: None,
            last_event_at: None,
            pending: None,
        }
    }

    pub fn with_store(mut self, store: SharedStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_remote(mut self, remote: Box<dyn RemoteRecognizer>) -> Self {
        self.remote = Some(remote);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn state(&self) -> PipelineState {
        PipelineState {
            mode: self.mode,
            last_detection_at: self.last_detection_at,
        }
    }

    pub fn pending_capture(&self) -> Option<&str> {
        self.pending.as_ref().map(|p| p.name.as_str())
    }

    pub fn temp_dir(&self) -> &Path {
        &self.config.temp_dir
    }

    /// Timestamps never run backwards within one pipeline's event stream.
    fn event(&mut self, now: Timestamp, kind: EventKind) -> PipelineEvent {
        let at = self.last_event_at.map_or(now, |last| now.max(last));
        self.last_event_at = Some(at);
        PipelineEvent { at, kind }
    }

    fn check_dependencies(&self) -> Result<(), PipelineError> {
        let has_store = self.store.is_some();
        let has_remote = self.remote.is_some();
        match self.mode {
            Mode::Offline if !has_store => Err(PipelineError::NoStore(self.mode)),
            Mode::Online if !has_remote => Err(PipelineError::NoServer),
            // Enrolment may be backed by the server when it was entered from Online.
            Mode::Enrolment if !has_store && !(has_remote && self.enrol_backing == Mode::Online) => {
                Err(PipelineError::NoStore(self.mode))
            }
            _ => Ok(()),
        }
    }

    /// Runs detection on one frame and, when a face is found outside the
    /// cooldown window, identifies or captures it depending on the mode.
    pub fn process_frame(&mut self, frame: &GrayImage, now: Timestamp) -> Result<Vec<PipelineEvent>, PipelineError> {
        self.check_dependencies()?;
        if let Some(last) = self.last_detection_at {
            if now.saturating_sub(last) < self.config.cooldown_ms as i64 {
                return Ok(Vec::new());
            }
        }
        let boxes = detect(&self.cascade, frame, &self.config.detect_params)?;
        let Some(face_box) = boxes
            .iter()
            .copied()
            .min_by(|a, b| b.area().cmp(&a.area()).then((a.y, a.x).cmp(&(b.y, b.x))))
        else {
            return Ok(Vec::new());
        };

        let mut events = vec![self.event(
            now,
            EventKind::FaceDetected {
                bounding_box: face_box,
            },
        )];
        self.last_detection_at = Some(now);
        let face = crop(frame, &face_box).expect("detections lie inside the frame");
        let (name, path) = self.write_temp(&face)?;

        if self.mode == Mode::Enrolment {
            self.clear_pending();
            self.pending = Some(PendingCapture {
                name: name.clone(),
                path,
                face,
            });
            events.push(self.event(now, EventKind::EnrolmentCaptured { temp_image_ref: name }));
            return Ok(events);
        }

        let outcome = self.identify(&face, now);
        remove_quietly(&path);
        events.push(match outcome {
            Ok(kind) => self.event(now, kind),
            Err(e) => self.event(now, EventKind::Error { message: e.to_string() }),
        });
        Ok(events)
    }

    fn identify(&mut self, face: &GrayImage, now: Timestamp) -> Result<EventKind, PipelineError> {
        if self.mode == Mode::Online {
            let remote = self.remote.as_ref().ok_or(PipelineError::NoServer)?;
            match remote.identify(face) {
                Ok(answer) => return Ok(remote_outcome(answer)),
                Err(RemoteError::Transport(msg)) if self.config.online_fallback && self.store.is_some() => {
                    tracing::warn!(error = %msg, "server unreachable, identifying locally");
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.identify_locally(face, now)
    }

    fn identify_locally(&mut self, face: &GrayImage, now: Timestamp) -> Result<EventKind, PipelineError> {
        let store = self.store.as_ref().ok_or(PipelineError::NoStore(self.mode))?;
        let mut store = store.lock().expect("face store lock poisoned");
        if store.is_empty() {
            return Ok(EventKind::UnknownPerson { distance: None });
        }
        let model = store.recognizer(&self.config.lbp_params)?;
        let prediction = model.predict(face).map_err(StoreError::from)?;
        if !prediction.is_known {
            return Ok(EventKind::UnknownPerson {
                distance: Some(prediction.distance),
            });
        }
        let record = store.record_usage(&prediction.label, now)?;
        Ok(EventKind::PersonIdentified {
            person_id: record.id,
            display_name: record.display_name,
            distance: prediction.distance,
            via: Via::Local,
        })
    }

    /// Switches mode. Any pending enrolment capture is discarded.
    pub fn set_mode(&mut self, mode: Mode, now: Timestamp) -> PipelineEvent {
        let from = self.mode;
        self.clear_pending();
        if mode == Mode::Enrolment && from != Mode::Enrolment {
            self.enrol_backing = from;
        }
        self.mode = mode;
        self.event(now, EventKind::StateChanged { from, to: mode })
    }

    /// Adds the pending capture to the face database under the given details.
    pub fn complete_enrolment(
        &mut self,
        temp_ref: &str,
        display_name: &str,
        notes: &str,
        now: Timestamp,
    ) -> Result<PipelineEvent, PipelineError> {
        if self.mode != Mode::Enrolment {
            return Err(PipelineError::NotEnrolling);
        }
        match &self.pending {
            Some(p) if p.name == temp_ref => {}
            _ => return Err(PipelineError::UnknownCapture(temp_ref.to_string())),
        }
        if display_name.trim().is_empty() {
            return Err(PipelineError::EmptyName);
        }
        let face = self.pending.as_ref().expect("checked above").face.clone();

        let mut via = Via::Local;
        let mut person_id = None;
        if self.enrol_backing == Mode::Online {
            if let Some(remote) = &self.remote {
                match remote.enroll(display_name, notes, &face) {
                    Ok(id) => {
                        via = Via::Server;
                        person_id = Some(id);
                    }
                    Err(RemoteError::Transport(msg)) if self.config.online_fallback && self.store.is_some() => {
                        tracing::warn!(error = %msg, "server unreachable, enrolling locally");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let person_id = match person_id {
            Some(id) => id,
            None => {
                let store = self.store.as_ref().ok_or(PipelineError::NoStore(self.mode))?;
                let mut store = store.lock().expect("face store lock poisoned");
                store.enroll(display_name, notes, &face, now)?.id
            }
        };
        self.clear_pending();
        Ok(self.event(
            now,
            EventKind::PersonEnrolled {
                person_id,
                display_name: display_name.to_string(),
                via,
            },
        ))
    }

    /// Moves between Offline and Online following reachability. Enrolment is
    /// left alone.
    pub fn check_connectivity(&mut self, probe: impl FnOnce() -> bool, now: Timestamp) -> Option<PipelineEvent> {
        if self.mode == Mode::Enrolment {
            return None;
        }
        match (self.mode, probe()) {
            (Mode::Offline, true) => Some(self.set_mode(Mode::Online, now)),
            (Mode::Online, false) => Some(self.set_mode(Mode::Offline, now)),
            _ => None,
        }
    }

    fn write_temp(&self, face: &GrayImage) -> Result<(String, PathBuf), PipelineError> {
        fs::create_dir_all(&self.config.temp_dir)?;
        let name = format!("capture-{}.pgm", uuid::Uuid::new_v4().simple());
        let path = self.config.temp_dir.join(&name);
        fs::write(&path, save_pgm(face))?;
        Ok((name, path))
    }

    fn clear_pending(&mut self) {
        if let Some(p) = self.pending.take() {
            remove_quietly(&p.path);
        }
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        self.clear_pending();
    }
}

fn remote_outcome(answer: RemoteIdentification) -> EventKind {
    match answer.matched {
        Some(m) => EventKind::PersonIdentified {
            person_id: m.person_id,
            display_name: m.display_name,
            distance: m.distance,
            via: Via::Server,
        },
        None => EventKind::UnknownPerson {
            distance: answer.distance,
        },
    }
}

fn remove_quietly(path: &Path) {
    if let Err(e) = fs::remove_file(path) {
        if e.kind() != std::io::ErrorKind::NotFound {
            tracing::warn!(path = %path.display(), error = %e, "could not delete temporary image");
        }
    }
}
