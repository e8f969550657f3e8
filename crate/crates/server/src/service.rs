//! Store-backed operations behind the support endpoints.

use facekit::facestore::{FaceStore, SharedStore, StoreError};
use facekit::imaging::GrayImage;
use facekit::lbph::LbpParams;
use facekit::pipeline::{RemoteError, RemoteRecognizer};
use facekit::Timestamp;

use crate::api::{ApiImage, IdentifyResponse, MatchInfo, SyncPerson, SyncResponse};

/// Nearest stored person for `face`. A match counts as one usage.
pub fn identify(
    store: &mut FaceStore,
    face: &GrayImage,
    params: &LbpParams,
    now: Timestamp,
) -> Result<IdentifyResponse, StoreError> {
    if store.is_empty() {
        return Ok(IdentifyResponse {
            matched: None,
            distance: None,
        });
    }
    let model = store.recognizer(params)?;
    let prediction = model.predict(face)?;
    let matched = if prediction.is_known {
        let record = store.record_usage(&prediction.label, now)?;
        Some(MatchInfo {
            person_id: record.id,
            display_name: record.display_name,
            distance: prediction.distance,
        })
    } else {
        None
    };
    Ok(IdentifyResponse {
        matched,
        distance: Some(prediction.distance),
    })
}

/// The `limit` most strongly retained people with their face images.
pub fn sync(store: &FaceStore, limit: usize) -> Result<SyncResponse, StoreError> {
    let persons = store
        .retention_ranking()
        .into_iter()
        .take(limit)
        .map(|r| {
            let faces = r
                .face_images
                .iter()
                .map(|f| store.face_bytes(f).map(|b| ApiImage::from_pgm_bytes(&b)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SyncPerson {
                person_id: r.id.clone(),
                display_name: r.display_name.clone(),
                notes: r.notes.clone(),
                usage_count: r.usage_count,
                faces,
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    Ok(SyncResponse { persons })
}

/// Serves a pipeline's online mode from the server's own store, without a
/// network round trip.
pub struct StoreRemote {
    store: SharedStore,
    params: LbpParams,
}

impl StoreRemote {
    pub fn new(store: SharedStore, params: LbpParams) -> Self {
        StoreRemote { store, params }
    }
}

impl RemoteRecognizer for StoreRemote {
    fn identify(&self, face: &GrayImage) -> Result<IdentifyResponse, RemoteError> {
        let mut store = self.store.lock().expect("face store lock poisoned");
        identify(&mut store, face, &self.params, facekit::now_millis())
            .map_err(|e| RemoteError::Rejected(e.to_string()))
    }

    fn enroll(&self, display_name: &str, notes: &str, face: &GrayImage) -> Result<String, RemoteError> {
        let mut store = self.store.lock().expect("face store lock poisoned");
        store
            .enroll(display_name, notes, face, facekit::now_millis())
            .map(|r| r.id)
            .map_err(|e| RemoteError::Rejected(e.to_string()))
    }
}
