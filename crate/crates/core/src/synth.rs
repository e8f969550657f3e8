//! Deterministic synthetic data: toy cascades, frames with planted contrast
//! patterns, and face-like images. Used for demos, corpus generation and
//! tests where real footage is not available.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::cascade::{CascadeModel, FeaturePart, HaarFeature, Stage, WeakStump};
use crate::imaging::{GrayImage, Rect};

/// Intensities of the planted pattern surround and centre.
pub const PLANT_DARK: u8 = 0;
pub const PLANT_BRIGHT: u8 = 255;

/// Left half weighted -1, right half +1.
pub fn contrast_feature(window_w: u32, window_h: u32) -> HaarFeature {
    let half = window_w / 2;
    HaarFeature {
        parts: vec![
            FeaturePart::new(Rect::new(0, 0, half, window_h), -1.0),
            FeaturePart::new(Rect::new(half, 0, half, window_h), 1.0),
        ],
    }
}

/// Single stage, single stump over [`contrast_feature`], voting -1 / +1.
pub fn contrast_cascade(window_w: u32, window_h: u32, stump_threshold: f64, stage_threshold: f64) -> CascadeModel {
    CascadeModel {
        window_w,
        window_h,
        stages: vec![Stage {
            stumps: vec![WeakStump {
                feature: contrast_feature(window_w, window_h),
                threshold: stump_threshold,
                left_value: -1.0,
                right_value: 1.0,
            }],
            stage_threshold,
        }],
    }
}

/// Bright centre (middle half on both axes) weighted +4 against the whole
/// window at -1.
pub fn centre_surround_feature(window_w: u32, window_h: u32) -> HaarFeature {
    HaarFeature {
        parts: vec![
            FeaturePart::new(Rect::new(0, 0, window_w, window_h), -1.0),
            FeaturePart::new(Rect::new(window_w / 4, window_h / 4, window_w / 2, window_h / 2), 4.0),
        ],
    }
}

/// Cascade that fires on blocks drawn by [`plant_pattern`]. The first stage
/// looks for a bright centre in a dark surround, the second for a balanced
/// surround left/right and top/bottom.
pub fn planted_pattern_cascade(window: u32, centre_threshold: f64) -> CascadeModel {
    let w = window;
    let h = window;
    let stump = |parts: Vec<FeaturePart>, threshold: f64, left: f64, right: f64| WeakStump {
        feature: HaarFeature { parts },
        threshold,
        left_value: left,
        right_value: right,
    };
    let halves = |vertical: bool| {
        if vertical {
            vec![
                FeaturePart::new(Rect::new(0, 0, w, h / 2), -1.0),
                FeaturePart::new(Rect::new(0, h / 2, w, h / 2), 1.0),
            ]
        } else {
            vec![
                FeaturePart::new(Rect::new(0, 0, w / 2, h), -1.0),
                FeaturePart::new(Rect::new(w / 2, 0, w / 2, h), 1.0),
            ]
        }
    };
    CascadeModel {
        window_w: w,
        window_h: h,
        stages: vec![
            Stage {
                stumps: vec![stump(centre_surround_feature(w, h).parts, centre_threshold, -1.0, 1.0)],
                stage_threshold: 0.0,
            },
            Stage {
                stumps: vec![
                    stump(halves(false), -0.15, -1.0, 1.0),
                    stump(halves(false), 0.15, 1.0, -1.0),
                    stump(halves(true), -0.15, -1.0, 1.0),
                    stump(halves(true), 0.15, 1.0, -1.0),
                ],
                stage_threshold: 3.5,
            },
        ],
    }
}

/// Draws a planted block at `r`: a dark square with a bright centre covering
/// the middle half on both axes.
pub fn plant_pattern(img: &mut GrayImage, r: &Rect) {
    let (cx0, cx1) = (r.x + r.w / 4, r.x + r.w / 4 + r.w / 2);
    let (cy0, cy1) = (r.y + r.h / 4, r.y + r.h / 4 + r.h / 2);
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            let centre = (cx0..cx1).contains(&x) && (cy0..cy1).contains(&y);
            img.set(x, y, if centre { PLANT_BRIGHT } else { PLANT_DARK });
        }
    }
}

/// [`plant_pattern`] with seeded noise of up to `amplitude` added, so that
/// crops of different seeds get distinct textures.
pub fn plant_textured_pattern(img: &mut GrayImage, r: &Rect, amplitude: u8, seed: u64) {
    plant_pattern(img, r);
    let mut rng = StdRng::seed_from_u64(seed);
    let a = amplitude as i16;
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            let v = img.get(x, y) as i16 + rng.random_range(-a..=a);
            img.set(x, y, v.clamp(0, 255) as u8);
        }
    }
}

/// Constant frame with one planted block.
pub fn planted_frame(width: u32, height: u32, background: u8, block: &Rect) -> GrayImage {
    let mut img = GrayImage::filled(width, height, background).expect("non-empty frame");
    plant_pattern(&mut img, block);
    img
}

/// Face-like image: a lit oval on a shaded background with eyes, brows, nose
/// and mouth whose geometry and texture depend on `seed`.
pub fn synthetic_face(seed: u64, size: u32) -> GrayImage {
    let mut rng = StdRng::seed_from_u64(seed);
    let s = size as f64;
    let bg_a: f64 = rng.random_range(20.0..90.0);
    let bg_b: f64 = rng.random_range(20.0..90.0);
    let skin: f64 = rng.random_range(120.0..210.0);
    let face_rx = s * rng.random_range(0.30..0.42);
    let face_ry = s * rng.random_range(0.38..0.47);
    let eye_y = s * rng.random_range(0.36..0.44);
    let eye_dx = s * rng.random_range(0.12..0.20);
    let eye_r = s * rng.random_range(0.04..0.07);
    let eye_tone: f64 = rng.random_range(10.0..70.0);
    let brow_lift = s * rng.random_range(0.06..0.10);
    let mouth_y = s * rng.random_range(0.68..0.76);
    let mouth_w = s * rng.random_range(0.12..0.24);
    let mouth_h = s * rng.random_range(0.02..0.05);
    let nose_len = s * rng.random_range(0.10..0.18);
    let freq_x: f64 = rng.random_range(0.15..0.6);
    let freq_y: f64 = rng.random_range(0.15..0.6);
    let texture: f64 = rng.random_range(6.0..18.0);
    let cx = s / 2.0;
    let cy = s / 2.0;

    let noise: Vec<f64> = (0..size as usize * size as usize)
        .map(|_| rng.random_range(-6.0..6.0))
        .collect();

    GrayImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = bg_a + (bg_b - bg_a) * fy / s;
        let oval = ((fx - cx) / face_rx).powi(2) + ((fy - cy) / face_ry).powi(2);
        if oval <= 1.0 {
            // Side lighting plus a seeded texture.
            v = skin * (1.0 - 0.25 * (fx - cx) / face_rx)
                + texture * (fx * freq_x).sin() * (fy * freq_y).cos();
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                if ((fx - ex).powi(2) + (fy - eye_y).powi(2)).sqrt() <= eye_r {
                    v = eye_tone;
                }
                let by = eye_y - brow_lift;
                if (fx - ex).abs() <= eye_r * 1.6 && (fy - by).abs() <= eye_r * 0.35 {
                    v = eye_tone * 0.8;
                }
            }
            if (fx - cx).abs() <= s * 0.02 && fy >= eye_y && fy <= eye_y + nose_len {
                v -= 45.0;
            }
            if (fx - cx).abs() <= mouth_w / 2.0 && (fy - mouth_y).abs() <= mouth_h {
                v = eye_tone + 20.0;
            }
        }
        v += noise[y as usize * size as usize + x as usize];
        v.round().clamp(0.0, 255.0) as u8
    })
    .expect("non-empty face")
}

/// Copy of `img` with uniform per-pixel noise in `[-amplitude, amplitude]`.
pub fn perturb(img: &GrayImage, amplitude: u8, seed: u64) -> GrayImage {
    let mut rng = StdRng::seed_from_u64(seed);
    let a = amplitude as i16;
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| (p as i16 + rng.random_range(-a..=a)).clamp(0, 255) as u8)
        .collect();
    GrayImage::new(img.width(), img.height(), pixels).expect("same dimensions")
}

/// Pastes `patch` into `img` with its top-left corner at `(x, y)`.
pub fn paste(img: &mut GrayImage, patch: &GrayImage, x: u32, y: u32) {
    for py in 0..patch.height() {
        for px in 0..patch.width() {
            img.set(x + px, y + py, patch.get(px, py));
        }
    }
}
