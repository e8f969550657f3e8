//! Face detection and recognition toolkit.
//!
//! * [`imaging`]: grayscale rasters, integral images, PGM.
//! * [`cascade`]: Haar-cascade sliding-window detector.
//! * [`lbph`]: Local Binary Patterns Histograms recognizer.
//! * [`facestore`]: capacity-capped enrolment database with encrypted identities.
//! * [`pipeline`]: the per-frame offline/online/enrolment state machine.
//! * [`eval`]: accuracy arithmetic and corpus evaluation.
//! * [`synth`]: deterministic synthetic faces, frames and toy cascades.

pub mod cascade;
pub mod eval;
pub mod facestore;
pub mod imaging;
pub mod lbph;
pub mod pipeline;
pub mod synth;

/// Milliseconds since the Unix epoch, UTC.
pub type Timestamp = i64;

/// Current wall-clock time as a [`Timestamp`].
pub fn now_millis() -> Timestamp {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as Timestamp)
        .unwrap_or(0)
}
