//! Blocking HTTP client for a remote support server.

use std::time::Duration;

use facekit::imaging::GrayImage;
use facekit::pipeline::{RemoteError, RemoteRecognizer};
use serde::de::DeserializeOwned;
use ureq::http::Response;
use ureq::{Agent, Body};

use crate::api::{
    ApiImage, EnrollRequest, EnrollResponse, ErrorBody, IdentifyResponse, ImageRequest, SyncResponse,
};

pub struct HttpRemote {
    base: String,
    agent: Agent,
}

impl HttpRemote {
    /// `base` is the server origin, e.g. `http://10.0.0.2:8080`.
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpRemote {
            base: base.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// True when `/health` answers 200.
    pub fn probe(&self) -> bool {
        matches!(self.agent.get(self.url("/health")).call(), Ok(r) if r.status().is_success())
    }

    pub fn sync(&self, limit: Option<usize>) -> Result<SyncResponse, RemoteError> {
        let mut req = self.agent.get(self.url("/api/v1/sync"));
        if let Some(k) = limit {
            req = req.query("limit", k.to_string());
        }
        read(req.call().map_err(transport)?)
    }
}

fn transport(e: ureq::Error) -> RemoteError {
    RemoteError::Transport(e.to_string())
}

fn read<T: DeserializeOwned>(mut resp: Response<Body>) -> Result<T, RemoteError> {
    let status = resp.status();
    if !status.is_success() {
        let detail = resp
            .body_mut()
            .read_json::<ErrorBody>()
            .map(|b| b.error)
            .unwrap_or_default();
        return Err(RemoteError::Rejected(format!("{status}: {detail}")));
    }
    resp.body_mut()
        .read_json()
        .map_err(|e| RemoteError::Rejected(format!("unreadable response: {e}")))
}

impl RemoteRecognizer for HttpRemote {
    fn identify(&self, face: &GrayImage) -> Result<IdentifyResponse, RemoteError> {
        let body = ImageRequest {
            image: ApiImage::from_image(face),
        };
        let resp = self
            .agent
            .post(self.url("/api/v1/identify"))
            .send_json(&body)
            .map_err(transport)?;
        read(resp)
    }

    fn enroll(&self, display_name: &str, notes: &str, face: &GrayImage) -> Result<String, RemoteError> {
        let body = EnrollRequest {
            display_name: display_name.to_string(),
            notes: notes.to_string(),
            image: ApiImage::from_image(face),
        };
        let resp = self
            .agent
            .post(self.url("/api/v1/enroll"))
            .send_json(&body)
            .map_err(transport)?;
        read::<EnrollResponse>(resp).map(|r| r.person_id)
    }
}
