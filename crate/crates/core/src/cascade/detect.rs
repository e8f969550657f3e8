use crate::imaging::{GrayImage, ImageError, IntegralImage, Rect};

use super::group::{group_with_counts, rects_similar};
use super::{CascadeError, CascadeModel, DetectParams};

/// Outcome of running the cascade over one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowVerdict {
    pub accepted: bool,
    /// Zero-based index of the first stage whose sum fell below its threshold.
    pub rejected_at_stage: Option<usize>,
}

/// Mean and standard deviation of a window; the deviation is floored at 1 so
/// flat windows stay finite after normalization.
pub fn window_stats(ii: &IntegralImage, window: &Rect) -> Result<(f64, f64), ImageError> {
    let area = window.area() as f64;
    let sum = ii.rect_sum(window)? as f64;
    let sq = ii.rect_squared_sum(window)? as f64;
    Ok(stats_from_sums(sum, sq, area))
}

#[inline]
fn stats_from_sums(sum: f64, sq: f64, area: f64) -> (f64, f64) {
    let mean = sum / area;
    let var = sq / area - mean * mean;
    (mean, var.max(1.0).sqrt())
}

pub fn evaluate_window(
    model: &CascadeModel,
    ii: &IntegralImage,
    window: &Rect,
) -> Result<WindowVerdict, CascadeError> {
    if !window.fits_within(ii.image_width(), ii.image_height()) {
        return Err(ImageError::OutOfBounds(*window, ii.image_width(), ii.image_height()).into());
    }
    let scale = window.w as f64 / model.window_w as f64;
    if (window.h as f64 - model.window_h as f64 * scale).abs() > 1.0 {
        return Err(CascadeError::WindowAspect(*window));
    }
    let scaled = ScaledCascade::new(model, window.w, window.h, ii.width() as usize);
    Ok(scaled.evaluate(ii, window.x as usize, window.y as usize))
}

/// Every accepted window across all scales, before grouping, in scan order.
pub fn detect_raw(
    model: &CascadeModel,
    img: &GrayImage,
    params: &DetectParams,
) -> Result<Vec<Rect>, CascadeError> {
    params.validate()?;
    if img.width() < model.window_w || img.height() < model.window_h {
        return Err(CascadeError::ImageTooSmall {
            image_w: img.width(),
            image_h: img.height(),
            window_w: model.window_w,
            window_h: model.window_h,
        });
    }
    let ii = IntegralImage::new(img);
    let (min_w, min_h) = params.min_size.unwrap_or((model.window_w, model.window_h));
    let stride = ii.width() as usize;
    let mut hits = Vec::new();

    for k in 0.. {
        let factor = params.scale_factor.powi(k);
        let win_w = (model.window_w as f64 * factor).round() as u32;
        let win_h = (model.window_h as f64 * factor).round() as u32;
        if win_w > img.width() || win_h > img.height() {
            break;
        }
        if win_w < min_w || win_h < min_h {
            continue;
        }
        let step = ((params.step_fraction * win_w as f64).round() as u32).max(1) as usize;
        let scaled = ScaledCascade::new(model, win_w, win_h, stride);
        let max_x = (img.width() - win_w) as usize;
        let max_y = (img.height() - win_h) as usize;
        for y in (0..=max_y).step_by(step) {
            for x in (0..=max_x).step_by(step) {
                if scaled.evaluate(&ii, x, y).accepted {
                    hits.push(Rect::new(x as u32, y as u32, win_w, win_h));
                }
            }
        }
    }
    Ok(hits)
}

/// Multi-scale sliding-window detection followed by rectangle grouping.
///
/// Results are ordered by descending area, then top-to-bottom, left-to-right.
/// When two grouped rects still satisfy the similarity relation, the one with
/// fewer supporting raw hits is dropped.
pub fn detect(
    model: &CascadeModel,
    img: &GrayImage,
    params: &DetectParams,
) -> Result<Vec<Rect>, CascadeError> {
    let raw = detect_raw(model, img, params)?;
    let mut groups = group_with_counts(&raw, params.min_neighbors, params.grouping_eps);
    groups.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.0.area().cmp(&a.0.area()))
            .then((a.0.y, a.0.x, a.0.w, a.0.h).cmp(&(b.0.y, b.0.x, b.0.w, b.0.h)))
    });
    let mut kept: Vec<Rect> = Vec::with_capacity(groups.len());
    for (rect, _) in groups {
        if !kept.iter().any(|k| rects_similar(k, &rect, params.grouping_eps)) {
            kept.push(rect);
        }
    }
    kept.sort_by(super::group::detection_order);
    Ok(kept)
}

struct ScaledPart {
    // Table offsets of the four corners relative to the window origin.
    top_left: usize,
    top_right: usize,
    bottom_left: usize,
    bottom_right: usize,
    weight: f64,
}

struct ScaledStump {
    /// End of this stump's run in `ScaledCascade::parts`.
    parts_end: usize,
    threshold: f64,
    /// Right value, then left; indexed by the comparison outcome.
    votes: [f64; 2],
}

struct ScaledStage {
    /// End of this stage's run in `ScaledCascade::stumps`.
    stumps_end: usize,
    threshold: f64,
}

/// A cascade with its feature rects rescaled to one window size and resolved to
/// integral-table offsets, flattened so the scan walks contiguous memory.
struct ScaledCascade {
    parts: Vec<ScaledPart>,
    stumps: Vec<ScaledStump>,
    stages: Vec<ScaledStage>,
    area: f64,
    window: ScaledPart,
}

impl ScaledCascade {
    fn new(model: &CascadeModel, win_w: u32, win_h: u32, stride: usize) -> Self {
        let scale = win_w as f64 / model.window_w as f64;
        let offsets = |x: u32, y: u32, w: u32, h: u32, weight: f64| {
            let (x, y, w, h) = (x as usize, y as usize, w as usize, h as usize);
            ScaledPart {
                top_left: y * stride + x,
                top_right: y * stride + x + w,
                bottom_left: (y + h) * stride + x,
                bottom_right: (y + h) * stride + x + w,
                weight,
            }
        };
        let mut parts = Vec::new();
        let mut stumps = Vec::new();
        let mut stages = Vec::with_capacity(model.stages.len());
        for stage in &model.stages {
            for stump in &stage.stumps {
                for p in &stump.feature.parts {
                    let (x, w) = scale_span(p.x, p.w, scale, win_w);
                    let (y, h) = scale_span(p.y, p.h, scale, win_h);
                    parts.push(offsets(x, y, w, h, p.weight));
                }
                stumps.push(ScaledStump {
                    parts_end: parts.len(),
                    threshold: stump.threshold,
                    votes: [stump.right_value, stump.left_value],
                });
            }
            stages.push(ScaledStage {
                stumps_end: stumps.len(),
                threshold: stage.stage_threshold,
            });
        }
        ScaledCascade {
            parts,
            stumps,
            stages,
            area: win_w as f64 * win_h as f64,
            window: offsets(0, 0, win_w, win_h, 1.0),
        }
    }

    #[inline]
    fn evaluate(&self, ii: &IntegralImage, x: usize, y: usize) -> WindowVerdict {
        let base = y * ii.width() as usize + x;
        let sums = &ii.raw_sums()[base..];
        let sum = corner_sum(sums, &self.window) as f64;
        let sq = corner_sum(&ii.raw_squared_sums()[base..], &self.window) as f64;
        let (_, stddev) = stats_from_sums(sum, sq, self.area);
        let norm = 1.0 / (self.area * stddev);

        let (mut stump_start, mut part_start) = (0, 0);
        for (index, stage) in self.stages.iter().enumerate() {
            let mut stage_sum = 0.0;
            for stump in &self.stumps[stump_start..stage.stumps_end] {
                let mut feature = 0.0;
                for p in &self.parts[part_start..stump.parts_end] {
                    feature += p.weight * corner_sum(sums, p) as f64;
                }
                part_start = stump.parts_end;
                // Indexing instead of branching: the outcome is close to random.
                stage_sum += stump.votes[(feature * norm < stump.threshold) as usize];
            }
            stump_start = stage.stumps_end;
            if stage_sum < stage.threshold {
                return WindowVerdict {
                    accepted: false,
                    rejected_at_stage: Some(index),
                };
            }
        }
        WindowVerdict {
            accepted: true,
            rejected_at_stage: None,
        }
    }
}

// The true result is never negative, so wrapping intermediates are exact.
#[inline]
fn corner_sum(table: &[u64], part: &ScaledPart) -> u64 {
    table[part.bottom_right]
        .wrapping_add(table[part.top_left])
        .wrapping_sub(table[part.top_right])
        .wrapping_sub(table[part.bottom_left])
}

/// Scales an offset/length pair by rounding each independently, then clamps
/// the span into `[0, limit)` keeping it at least one pixel long.
fn scale_span(offset: u32, len: u32, scale: f64, limit: u32) -> (u32, u32) {
    let mut start = ((offset as f64 * scale).round() as u32).min(limit - 1);
    let len = ((len as f64 * scale).round() as u32).max(1);
    if start + len > limit {
        start = start.min(limit - 1);
        return (start, limit - start);
    }
    (start, len)
}
