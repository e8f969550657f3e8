//! Wire types shared by the server handlers and the HTTP client.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use facekit::imaging::{load_pgm, save_pgm, GrayImage, PgmError, Rect};
use facekit::pipeline::Mode;
use facekit::Timestamp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use facekit::pipeline::{RemoteIdentification as IdentifyResponse, RemoteMatch as MatchInfo};

pub const PGM_BASE64: &str = "pgm+base64";

/// An image in transit: a binary PGM, base64 encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiImage {
    pub encoding: String,
    pub data: String,
}

#[derive(Debug, Error)]
pub enum ImageDecodeError {
    #[error("unsupported image encoding {0:?}, expected \"pgm+base64\"")]
    Encoding(String),
    #[error("image data is not valid base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("image data is not a valid PGM: {0}")]
    Pgm(#[from] PgmError),
}

impl ApiImage {
    pub fn from_image(img: &GrayImage) -> Self {
        Self::from_pgm_bytes(&save_pgm(img))
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Self {
        ApiImage {
            encoding: PGM_BASE64.to_string(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<GrayImage, ImageDecodeError> {
        if self.encoding != PGM_BASE64 {
            return Err(ImageDecodeError::Encoding(self.encoding.clone()));
        }
        let bytes = STANDARD.decode(self.data.as_bytes())?;
        Ok(load_pgm(&bytes)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRequest {
    pub image: ApiImage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnrollRequest {
    pub display_name: String,
    #[serde(default)]
    pub notes: String,
    pub image: ApiImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnrollResponse {
    pub person_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SyncPerson {
    pub person_id: String,
    pub display_name: String,
    pub notes: String,
    pub usage_count: u64,
    pub faces: Vec<ApiImage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncResponse {
    pub persons: Vec<SyncPerson>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub boxes: Vec<Rect>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateRequest {
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StateResponse {
    pub mode: Mode,
    pub last_detection_at: Option<Timestamp>,
    pub pending_capture: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRequest {
    pub image: ApiImage,
    /// Frame time in milliseconds since the epoch; the server clock when absent.
    #[serde(default)]
    pub now: Option<Timestamp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompleteEnrolmentRequest {
    pub temp_ref: String,
    pub display_name: String,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub now: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
