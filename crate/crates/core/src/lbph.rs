//! Local Binary Patterns Histograms: per-pixel 3x3 codes, regional
//! histograms, and nearest-neighbour identification under the chi-square
//! distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{resize_bilinear, GrayImage, ImageError};

pub const BINS: usize = 256;

/// Neighbour offsets as `(dy, dx)`, clockwise from the top-left. The first
/// entry lands in the most significant bit.
const NEIGHBORS: [(i32, i32); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

#[derive(Debug, Error, PartialEq)]
pub enum LbphError {
    #[error("({x}, {y}) lies on the border of a {width}x{height} image")]
    BorderPixel { x: u32, y: u32, width: u32, height: u32 },
    #[error("image {width}x{height} is too small, need at least {min_w}x{min_h}")]
    TooSmall {
        width: u32,
        height: u32,
        min_w: u32,
        min_h: u32,
    },
    #[error("template lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("no training faces")]
    EmptyTrainingSet,
    #[error("recognizer model has no entries")]
    EmptyModel,
    #[error("template does not match the model parameters")]
    IncompatibleTemplate,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Which way a neighbour comparison is encoded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BitConvention {
    /// A bit is set when the centre is at least as bright as the neighbour.
    #[default]
    CenterAtLeastNeighbor,
    /// Bitwise complement of the above.
    Complemented,
}

impl BitConvention {
    fn is_default(&self) -> bool {
        *self == BitConvention::CenterAtLeastNeighbor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LbpParams {
    pub grid_x: u32,
    pub grid_y: u32,
    pub face_w: u32,
    pub face_h: u32,
    pub unknown_threshold: f64,
    #[serde(default, skip_serializing_if = "BitConvention::is_default")]
    pub convention: BitConvention,
}

impl Default for LbpParams {
    fn default() -> Self {
        LbpParams {
            grid_x: 8,
            grid_y: 8,
            face_w: 100,
            face_h: 100,
            unknown_threshold: 0.5,
            convention: BitConvention::default(),
        }
    }
}

impl LbpParams {
    pub fn validate(&self) -> Result<(), LbphError> {
        if self.grid_x == 0 || self.grid_y == 0 {
            return Err(LbphError::InvalidParams("grid must be at least 1x1"));
        }
        if self.face_w < self.grid_x + 2 || self.face_h < self.grid_y + 2 {
            return Err(LbphError::InvalidParams(
                "canonical face must be at least two pixels larger than the grid",
            ));
        }
        if !(self.unknown_threshold >= 0.0) {
            return Err(LbphError::InvalidParams("unknown threshold must be >= 0"));
        }
        Ok(())
    }

    pub fn template_len(&self) -> usize {
        self.grid_x as usize * self.grid_y as usize * BINS
    }
}

/// Concatenated, individually normalized region histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTemplate {
    histograms: Vec<f64>,
}

impl FaceTemplate {
    pub fn from_histograms(histograms: Vec<f64>) -> Self {
        FaceTemplate { histograms }
    }

    pub fn histograms(&self) -> &[f64] {
        &self.histograms
    }

    pub fn len(&self) -> usize {
        self.histograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histograms.is_empty()
    }

    pub fn regions(&self) -> impl Iterator<Item = &[f64]> {
        self.histograms.chunks(BINS)
    }
}

/// LBP code of an interior pixel.
pub fn lbp_code(img: &GrayImage, x: u32, y: u32) -> Result<u8, LbphError> {
    if x == 0 || y == 0 || x + 1 >= img.width() || y + 1 >= img.height() {
        return Err(LbphError::BorderPixel {
            x,
            y,
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(code_at(img.pixels(), img.width() as usize, x as usize, y as usize))
}

#[inline]
fn code_at(pixels: &[u8], stride: usize, x: usize, y: usize) -> u8 {
    let center = pixels[y * stride + x];
    NEIGHBORS.iter().fold(0u8, |code, &(dy, dx)| {
        let ny = (y as isize + dy as isize) as usize;
        let nx = (x as isize + dx as isize) as usize;
        (code << 1) | u8::from(center >= pixels[ny * stride + nx])
    })
}

/// Code image of size `(w - 2) x (h - 2)`.
pub fn lbp_image(img: &GrayImage) -> Result<GrayImage, LbphError> {
    lbp_image_with(img, BitConvention::default())
}

pub fn lbp_image_with(img: &GrayImage, convention: BitConvention) -> Result<GrayImage, LbphError> {
    if img.width() < 3 || img.height() < 3 {
        return Err(LbphError::TooSmall {
            width: img.width(),
            height: img.height(),
            min_w: 3,
            min_h: 3,
        });
    }
    let stride = img.width() as usize;
    let (out_w, out_h) = (img.width() - 2, img.height() - 2);
    let mut codes = Vec::with_capacity(out_w as usize * out_h as usize);
    for y in 1..=out_h as usize {
        for x in 1..=out_w as usize {
            let c = code_at(img.pixels(), stride, x, y);
            codes.push(match convention {
                BitConvention::CenterAtLeastNeighbor => c,
                BitConvention::Complemented => !c,
            });
        }
    }
    Ok(GrayImage::new(out_w, out_h, codes)?)
}

/// Region `r` of `grid` spans `[floor(r * extent / grid), floor((r + 1) * extent / grid))`.
fn region_bounds(extent: u32, grid: u32) -> Vec<(usize, usize)> {
    (0..grid as u64)
        .map(|r| {
            let lo = r * extent as u64 / grid as u64;
            let hi = (r + 1) * extent as u64 / grid as u64;
            (lo as usize, hi as usize)
        })
        .collect()
}

pub fn spatial_histogram(codes: &GrayImage, params: &LbpParams) -> Result<FaceTemplate, LbphError> {
    if params.grid_x == 0 || params.grid_y == 0 {
        return Err(LbphError::InvalidParams("grid must be at least 1x1"));
    }
    if codes.width() < params.grid_x || codes.height() < params.grid_y {
        return Err(LbphError::TooSmall {
            width: codes.width(),
            height: codes.height(),
            min_w: params.grid_x,
            min_h: params.grid_y,
        });
    }
    let cols = region_bounds(codes.width(), params.grid_x);
    let rows = region_bounds(codes.height(), params.grid_y);
    let stride = codes.width() as usize;
    let mut histograms = vec![0.0f64; params.template_len()];
    let mut counts = [0u32; BINS];
    for (ry, &(y0, y1)) in rows.iter().enumerate() {
        for (rx, &(x0, x1)) in cols.iter().enumerate() {
            counts.fill(0);
            for y in y0..y1 {
                for &code in &codes.pixels()[y * stride + x0..y * stride + x1] {
                    counts[code as usize] += 1;
                }
            }
            let total = ((y1 - y0) * (x1 - x0)) as f64;
            let offset = (ry * cols.len() + rx) * BINS;
            for (dst, &count) in histograms[offset..offset + BINS].iter_mut().zip(&counts) {
                *dst = count as f64 / total;
            }
        }
    }
    Ok(FaceTemplate { histograms })
}

/// Symmetric chi-square distance; bins empty in both templates contribute 0.
pub fn chi_square_distance(a: &FaceTemplate, b: &FaceTemplate) -> Result<f64, LbphError> {
    if a.len() != b.len() {
        return Err(LbphError::LengthMismatch(a.len(), b.len()));
    }
    Ok(chi_square(&a.histograms, &b.histograms))
}

fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let s = p + q;
            if s > 0.0 {
                (p - q) * (p - q) / s
            } else {
                0.0
            }
        })
        .sum()
}

/// Resize to the canonical face size, compute codes, then histograms.
pub fn extract_template(face: &GrayImage, params: &LbpParams) -> Result<FaceTemplate, LbphError> {
    params.validate()?;
    let canonical = resize_bilinear(face, params.face_w, params.face_h)?;
    let codes = lbp_image_with(&canonical, params.convention)?;
    spatial_histogram(&codes, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub label: String,
    #[serde(rename = "histogram")]
    pub template: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerModel {
    pub params: LbpParams,
    pub entries: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PredictionResult {
    pub label: String,
    pub distance: f64,
    pub is_known: bool,
    /// Index of the matching model entry.
    pub index: usize,
}

/// One entry per face, in input order.
pub fn train<'a, I>(faces: I, params: &LbpParams) -> Result<RecognizerModel, LbphError>
where
    I: IntoIterator<Item = (&'a GrayImage, &'a str)>,
{
    params.validate()?;
    let entries = faces
        .into_iter()
        .map(|(img, label)| {
            Ok(ModelEntry {
                label: label.to_string(),
                template: extract_template(img, params)?.histograms,
            })
        })
        .collect::<Result<Vec<_>, LbphError>>()?;
    if entries.is_empty() {
        return Err(LbphError::EmptyTrainingSet);
    }
    Ok(RecognizerModel {
        params: params.clone(),
        entries,
    })
}

impl RecognizerModel {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn predict(&self, face: &GrayImage) -> Result<PredictionResult, LbphError> {
        if self.entries.is_empty() {
            return Err(LbphError::EmptyModel);
        }
        let template = extract_template(face, &self.params)?;
        self.predict_template(&template)
    }

    /// Nearest entry by chi-square distance; ties resolve to the lowest index.
    pub fn predict_template(&self, template: &FaceTemplate) -> Result<PredictionResult, LbphError> {
        if template.len() != self.params.template_len() {
            return Err(LbphError::IncompatibleTemplate);
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, entry) in self.entries.iter().enumerate() {
            if entry.template.len() != template.len() {
                return Err(LbphError::IncompatibleTemplate);
            }
            let d = chi_square(&entry.template, &template.histograms);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (index, distance) = best.ok_or(LbphError::EmptyModel)?;
        Ok(PredictionResult {
            label: self.entries[index].label.clone(),
            distance,
            is_known: distance <= self.params.unknown_threshold,
            index,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("recognizer model serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

pub fn predict(model: &RecognizerModel, face: &GrayImage) -> Result<PredictionResult, LbphError> {
    model.predict(face)
}
