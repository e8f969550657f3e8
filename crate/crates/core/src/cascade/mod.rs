//! Boosted cascade of Haar-like stumps: model types, interchange formats,
//! window evaluation and the multi-scale detector.

mod detect;
mod group;
mod xml;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImageError, Rect};

pub use detect::{detect, detect_raw, evaluate_window, window_stats, WindowVerdict};
pub use group::{group_rectangles, rects_similar};
pub use xml::parse_cascade_xml;

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("cascade JSON: {0}")]
    Json(String),
    #[error("cascade XML: {0}")]
    Xml(String),
    #[error("missing <{element}> in {context}")]
    MissingElement {
        element: &'static str,
        context: String,
    },
    #[error("malformed number {value:?} in {context}")]
    MalformedNumber { value: String, context: String },
    #[error("stage {stage}: tilted features are not supported")]
    TiltedFeature { stage: usize },
    #[error("stage {stage}: only single-stump trees are supported")]
    TreeTooDeep { stage: usize },
    #[error("stage {stage}: missing stage_threshold")]
    MissingStageThreshold { stage: usize },
    #[error("window size must be at least 1x1, got {0}x{1}")]
    InvalidWindow(u32, u32),
    #[error("cascade has no stages")]
    NoStages,
    #[error("stage {stage} has no stumps")]
    EmptyStage { stage: usize },
    #[error("stage {stage}, stump {stump}: feature has {count} rects, expected 2 or 3")]
    PartCount {
        stage: usize,
        stump: usize,
        count: usize,
    },
    #[error("stage {stage}, stump {stump}: rect {rect:?} lies outside the {window_w}x{window_h} window")]
    RectOutsideWindow {
        stage: usize,
        stump: usize,
        rect: Rect,
        window_w: u32,
        window_h: u32,
    },
    #[error("stage {stage}, stump {stump}: left and right values are equal")]
    ConstantStump { stage: usize, stump: usize },
    #[error("stage {stage}: non-finite value")]
    NonFinite { stage: usize },
    #[error("image {image_w}x{image_h} is smaller than the {window_w}x{window_h} detection window")]
    ImageTooSmall {
        image_w: u32,
        image_h: u32,
        window_w: u32,
        window_h: u32,
    },
    #[error("window {0:?} does not match the model aspect ratio")]
    WindowAspect(Rect),
    #[error("invalid detection parameters: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// One weighted rectangle of a Haar-like feature, in window coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturePart {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub weight: f64,
}

impl FeaturePart {
    pub fn new(rect: Rect, weight: f64) -> Self {
        FeaturePart {
            x: rect.x,
            y: rect.y,
            w: rect.w,
            h: rect.h,
            weight,
        }
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaarFeature {
    pub parts: Vec<FeaturePart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WeakStump {
    pub feature: HaarFeature,
    pub threshold: f64,
    pub left_value: f64,
    pub right_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Stage {
    pub stumps: Vec<WeakStump>,
    pub stage_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CascadeModel {
    pub window_w: u32,
    pub window_h: u32,
    pub stages: Vec<Stage>,
}

impl CascadeModel {
    /// Checks the structural invariants. A feature whose weighted area does not
    /// cancel is only logged: some published cascades are slightly unbalanced.
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.window_w == 0 || self.window_h == 0 {
            return Err(CascadeError::InvalidWindow(self.window_w, self.window_h));
        }
        if self.stages.is_empty() {
            return Err(CascadeError::NoStages);
        }
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.stumps.is_empty() {
                return Err(CascadeError::EmptyStage { stage: si });
            }
            if !stage.stage_threshold.is_finite() {
                return Err(CascadeError::NonFinite { stage: si });
            }
            for (ti, stump) in stage.stumps.iter().enumerate() {
                let parts = &stump.feature.parts;
                if !(2..=3).contains(&parts.len()) {
                    return Err(CascadeError::PartCount {
                        stage: si,
                        stump: ti,
                        count: parts.len(),
                    });
                }
                if ![stump.threshold, stump.left_value, stump.right_value]
                    .iter()
                    .chain(parts.iter().map(|p| &p.weight))
                    .all(|v| v.is_finite())
                {
                    return Err(CascadeError::NonFinite { stage: si });
                }
                if stump.left_value == stump.right_value {
                    return Err(CascadeError::ConstantStump {
                        stage: si,
                        stump: ti,
                    });
                }
                for part in parts {
                    if !part.rect().fits_within(self.window_w, self.window_h) {
                        return Err(CascadeError::RectOutsideWindow {
                            stage: si,
                            stump: ti,
                            rect: part.rect(),
                            window_w: self.window_w,
                            window_h: self.window_h,
                        });
                    }
                }
                let weighted: Vec<f64> = parts
                    .iter()
                    .map(|p| p.weight * p.rect().area() as f64)
                    .collect();
                let largest = weighted.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let total: f64 = weighted.iter().sum();
                if total.abs() > 0.05 * largest {
                    tracing::warn!(
                        stage = si,
                        stump = ti,
                        imbalance = total,
                        "Haar feature is not zero-mean"
                    );
                }
            }
        }
        Ok(())
    }

    pub fn stump_count(&self) -> usize {
        self.stages.iter().map(|s| s.stumps.len()).sum()
    }
}

pub fn load_cascade_json(bytes: &[u8]) -> Result<CascadeModel, CascadeError> {
    let model: CascadeModel =
        serde_json::from_slice(bytes).map_err(|e| CascadeError::Json(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

pub fn save_cascade_json(model: &CascadeModel) -> Vec<u8> {
    serde_json::to_vec_pretty(model).expect("cascade model serializes")
}

/// Loads either interchange format, sniffing XML by its leading `<`.
pub fn load_cascade(bytes: &[u8]) -> Result<CascadeModel, CascadeError> {
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'<') {
        let text = std::str::from_utf8(bytes).map_err(|e| CascadeError::Xml(e.to_string()))?;
        parse_cascade_xml(text)
    } else {
        load_cascade_json(bytes)
    }
}

/// Scan parameters for [`detect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct DetectParams {
    pub scale_factor: f64,
    pub min_neighbors: u32,
    /// Smallest window to scan; the model window when unset.
    pub min_size: Option<(u32, u32)>,
    pub step_fraction: f64,
    pub grouping_eps: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            scale_factor: 1.1,
            min_neighbors: 3,
            min_size: None,
            step_fraction: 0.05,
            grouping_eps: 0.2,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<(), CascadeError> {
        if !(self.scale_factor > 1.0 && self.scale_factor.is_finite()) {
            return Err(CascadeError::InvalidParams("scale factor must be > 1"));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(CascadeError::InvalidParams("step fraction must be in (0, 1]"));
        }
        if !(self.grouping_eps >= 0.0 && self.grouping_eps.is_finite()) {
            return Err(CascadeError::InvalidParams("grouping eps must be >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::synth::contrast_cascade;
    use super::*;

    #[test]
    fn json_field_names_are_fixed() {
        let model = contrast_cascade(4, 2, 0.0, 0.0);
        let value: serde_json::Value = serde_json::from_slice(&save_cascade_json(&model)).unwrap();
        assert_eq!(value["windowW"], 4);
        assert_eq!(value["windowH"], 2);
        let stump = &value["stages"][0]["stumps"][0];
        assert_eq!(value["stages"][0]["stageThreshold"], 0.0);
        assert_eq!(stump["leftValue"], -1.0);
        assert_eq!(stump["rightValue"], 1.0);
        assert_eq!(stump["feature"]["parts"][1]["x"], 2);
        assert_eq!(stump["feature"]["parts"][1]["weight"], 1.0);
    }

    #[test]
    fn json_rejects_empty_stages() {
        let text = br#"{"windowW": 4, "windowH": 4, "stages": []}"#;
        assert_eq!(load_cascade_json(text).unwrap_err(), CascadeError::NoStages);
    }

    #[test]
    fn json_ignores_unknown_fields() {
        let model = contrast_cascade(4, 2, 0.0, 0.0);
        let mut value: serde_json::Value =
            serde_json::from_slice(&save_cascade_json(&model)).unwrap();
        value["comment"] = "trained elsewhere".into();
        value["stages"][0]["parent"] = (-1).into();
        let loaded = load_cascade_json(&serde_json::to_vec(&value).unwrap()).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn json_rejects_schema_violations() {
        assert!(matches!(
            load_cascade_json(br#"{"windowW": 4, "stages": []}"#),
            Err(CascadeError::Json(_))
        ));
        let mut model = contrast_cascade(4, 2, 0.0, 0.0);
        model.stages[0].stumps[0].feature.parts[1].x = 3;
        assert!(matches!(
            load_cascade_json(&save_cascade_json(&model)),
            Err(CascadeError::RectOutsideWindow { .. })
        ));
        let mut model = contrast_cascade(4, 2, 0.0, 0.0);
        model.stages[0].stumps[0].right_value = -1.0;
        assert!(matches!(
            load_cascade_json(&save_cascade_json(&model)),
            Err(CascadeError::ConstantStump { .. })
        ));
    }

    #[test]
    fn detect_params_validation() {
        assert!(DetectParams::default().validate().is_ok());
        let bad = DetectParams {
            scale_factor: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DetectParams {
            step_fraction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
