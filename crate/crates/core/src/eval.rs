//! Accuracy bookkeeping for detection and recognition experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{detect, CascadeError, CascadeModel, DetectParams};
use crate::facestore::{FaceStore, StoreError};
use crate::imaging::{crop, load_pgm, PgmError, Rect};
use crate::lbph::{LbpParams, LbphError};

/// Per-frame latency budget in milliseconds.
pub const FRAME_BUDGET_MS: f64 = 400.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame {0} is missing from the corpus")]
    MissingFrame(PathBuf),
    #[error("frame {file}: {source}")]
    BadFrame { file: String, source: PgmError },
    #[error("annotations: {0}")]
    Annotations(String),
    #[error("label {0:?} does not match any enrolled person")]
    UnknownLabel(String),
    #[error("annotation for {0} has no label")]
    MissingLabel(String),
    #[error("box {rect:?} lies outside frame {file}")]
    BoxOutsideFrame { file: String, rect: Rect },
    #[error(transparent)]
    Detection(#[from] CascadeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Recognition(#[from] LbphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One entry of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame: String,
    #[serde(default)]
    pub boxes: Vec<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

pub fn parse_annotations(bytes: &[u8]) -> Result<Vec<Annotation>, EvalError> {
    serde_json::from_slice(bytes).map_err(|e| EvalError::Annotations(e.to_string()))
}

/// `100 * correct / total`, or `None` when nothing was counted.
pub fn accuracy_percent(correct: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

pub fn format_accuracy(accuracy: Option<f64>) -> String {
    match accuracy {
        Some(a) => format!("{a:.2}"),
        None => "n/a".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectionReport {
    pub id: String,
    pub frames_with_faces: u64,
    pub detections: u64,
    pub correct: u64,
    pub incorrect: u64,
}

impl DetectionReport {
    pub fn from_counts(id: impl Into<String>, frames_with_faces: u64, correct: u64, incorrect: u64) -> Self {
        DetectionReport {
            id: id.into(),
            frames_with_faces,
            detections: correct + incorrect,
            correct,
            incorrect,
        }
    }

    pub fn accuracy_percent(&self) -> Option<f64> {
        accuracy_percent(self.correct, self.detections)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RecognitionReport {
    pub id: String,
    pub experiments: u64,
    pub correct: u64,
    pub incorrect: u64,
}

impl RecognitionReport {
    pub fn from_counts(id: impl Into<String>, correct: u64, incorrect: u64) -> Self {
        RecognitionReport {
            id: id.into(),
            experiments: correct + incorrect,
            correct,
            incorrect,
        }
    }

    pub fn accuracy_percent(&self) -> Option<f64> {
        accuracy_percent(self.correct, self.experiments)
    }
}

/// Counts from the original field trial: frames with faces, correct and
/// incorrect detections for each of the eight test videos.
pub const REFERENCE_DETECTION_COUNTS: [(u64, u64, u64); 8] = [
    (130, 15, 2),
    (67, 14, 2),
    (82, 14, 1),
    (79, 15, 3),
    (116, 17, 7),
    (270, 17, 2),
    (102, 10, 0),
    (139, 7, 1),
];

/// Correct and incorrect identifications for each of the four trial subjects.
pub const REFERENCE_RECOGNITION_COUNTS: [(u64, u64); 4] = [(32, 18), (26, 24), (29, 21), (35, 15)];

pub fn reference_detection_reports() -> Vec<DetectionReport> {
    REFERENCE_DETECTION_COUNTS
        .iter()
        .enumerate()
        .map(|(i, &(frames, c, w))| DetectionReport::from_counts(format!("video {}", i + 1), frames, c, w))
        .collect()
}

pub fn reference_recognition_reports() -> Vec<RecognitionReport> {
    REFERENCE_RECOGNITION_COUNTS
        .iter()
        .enumerate()
        .map(|(i, &(c, w))| RecognitionReport::from_counts(format!("person {}", i + 1), c, w))
        .collect()
}

/// A row of a rendered report.
pub trait ReportRow {
    fn columns() -> &'static [&'static str];
    fn cells(&self) -> Vec<String>;
}

impl ReportRow for DetectionReport {
    fn columns() -> &'static [&'static str] {
        &["id", "framesWithFaces", "detections", "correct", "incorrect", "accuracy"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.id.clone(),
            self.frames_with_faces.to_string(),
            self.detections.to_string(),
            self.correct.to_string(),
            self.incorrect.to_string(),
            format_accuracy(self.accuracy_percent()),
        ]
    }
}

impl ReportRow for RecognitionReport {
    fn columns() -> &'static [&'static str] {
        &["id", "experiments", "correct", "incorrect", "accuracy"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.id.clone(),
            self.experiments.to_string(),
            self.correct.to_string(),
            self.incorrect.to_string(),
            format_accuracy(self.accuracy_percent()),
        ]
    }
}

/// Aligned plain-text table: first column left-aligned, the rest right-aligned.
pub fn render_table<R: ReportRow>(rows: &[R]) -> String {
    let header: Vec<String> = R::columns().iter().map(|c| c.to_string()).collect();
    let body: Vec<Vec<String>> = rows.iter().map(ReportRow::cells).collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&body)
                .map(|r| r[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub fn render_csv<R: ReportRow>(rows: &[R]) -> String {
    let mut out = R::columns().join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.cells().into_iter().map(csv_escape).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn csv_escape(cell: String) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell
    }
}

/// Greedy one-to-one matching: candidate pairs with IoU at or above the
/// threshold are taken in order of decreasing IoU. Returns, for each
/// detection, the index of the ground-truth box it claimed.
pub fn match_detections(detections: &[Rect], truths: &[Rect], iou_threshold: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let iou = d.iou(t);
            if iou >= iou_threshold && iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![None; detections.len()];
    let mut taken = vec![false; truths.len()];
    for (_, i, j) in pairs {
        if assigned[i].is_none() && !taken[j] {
            assigned[i] = Some(j);
            taken[j] = true;
        }
    }
    assigned
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FrameTiming {
    pub frame: String,
    pub millis: f64,
    pub over_budget: bool,
    pub detections: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionEvaluation {
    pub report: DetectionReport,
    pub frames: Vec<FrameTiming>,
}

impl DetectionEvaluation {
    pub fn frames_over_budget(&self) -> impl Iterator<Item = &FrameTiming> {
        self.frames.iter().filter(|f| f.over_budget)
    }
}

fn read_frame(corpus: &Path, file: &str) -> Result<crate::imaging::GrayImage, EvalError> {
    let path = corpus.join(file);
    if !path.is_file() {
        return Err(EvalError::MissingFrame(path));
    }
    load_pgm(&fs::read(&path)?).map_err(|source| EvalError::BadFrame {
        file: file.to_string(),
        source,
    })
}

/// Runs the detector over every annotated frame and scores each detection
/// against the ground-truth boxes. Timing is recorded but never affects the
/// counts.
pub fn eval_detection(
    id: &str,
    corpus: &Path,
    annotations: &[Annotation],
    cascade: &CascadeModel,
    params: &DetectParams,
    iou_threshold: f64,
) -> Result<DetectionEvaluation, EvalError> {
    for a in annotations {
        if !corpus.join(&a.frame).is_file() {
            return Err(EvalError::MissingFrame(corpus.join(&a.frame)));
        }
    }
    let mut report = DetectionReport::from_counts(id, 0, 0, 0);
    let mut frames = Vec::with_capacity(annotations.len());
    for a in annotations {
        let img = read_frame(corpus, &a.frame)?;
        let start = Instant::now();
        let found = detect(cascade, &img, params)?;
        let millis = start.elapsed().as_secs_f64() * 1000.0;
        let correct = match_detections(&found, &a.boxes, iou_threshold)
            .iter()
            .filter(|m| m.is_some())
            .count();
        if !a.boxes.is_empty() {
            report.frames_with_faces += 1;
        }
        report.detections += found.len() as u64;
        report.correct += correct as u64;
        report.incorrect += (found.len() - correct) as u64;
        if millis > FRAME_BUDGET_MS {
            tracing::warn!(frame = %a.frame, millis, "frame exceeded the latency budget");
        }
        frames.push(FrameTiming {
            frame: a.frame.clone(),
            millis,
            over_budget: millis > FRAME_BUDGET_MS,
            detections: found.len(),
            correct,
        });
    }
    Ok(DetectionEvaluation { report, frames })
}

/// Identifies every labelled face crop against the store and tallies results
/// per person, in order of first appearance. Entries with boxes contribute
/// one experiment per box; entries without boxes use the whole frame.
///
/// A label may be either a person id or a display name.
pub fn eval_recognition(
    corpus: &Path,
    labels: &[Annotation],
    store: &FaceStore,
    params: &LbpParams,
) -> Result<Vec<RecognitionReport>, EvalError> {
    let resolve = |label: &str| -> Result<String, EvalError> {
        store
            .get(label)
            .or_else(|| store.records().find(|r| r.display_name == label))
            .map(|r| r.id.clone())
            .ok_or_else(|| EvalError::UnknownLabel(label.to_string()))
    };
    let mut expected = Vec::with_capacity(labels.len());
    for a in labels {
        let label = a.label.as_deref().ok_or_else(|| EvalError::MissingLabel(a.frame.clone()))?;
        expected.push((label, resolve(label)?));
    }

    let model = store.build_recognizer(params)?;
    let mut reports: Vec<RecognitionReport> = Vec::new();
    for (a, (label, person)) in labels.iter().zip(expected) {
        let img = read_frame(corpus, &a.frame)?;
        let crops = if a.boxes.is_empty() {
            vec![img]
        } else {
            a.boxes
                .iter()
                .map(|r| {
                    crop(&img, r).map_err(|_| EvalError::BoxOutsideFrame {
                        file: a.frame.clone(),
                        rect: *r,
                    })
                })
                .collect::<Result<_, _>>()?
        };
        let idx = match reports.iter().position(|r| r.id == label) {
            Some(i) => i,
            None => {
                reports.push(RecognitionReport::from_counts(label, 0, 0));
                reports.len() - 1
            }
        };
        for face in &crops {
            let hit = model.predict(face)?.label == person;
            let r = &mut reports[idx];
            r.experiments += 1;
            if hit {
                r.correct += 1;
            } else {
                r.incorrect += 1;
            }
        }
    }
    Ok(reports)
}
