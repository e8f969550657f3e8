//! Grayscale rasters, summed-area tables and the binary PGM codec.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    EmptyDimensions(u32, u32),
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("rect {0:?} does not fit inside a {1}x{2} image")]
    OutOfBounds(Rect, u32, u32),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("unsupported magic number {0:?}, only binary P5 is accepted")]
    UnsupportedMagic(String),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(&'static str),
    #[error("maxval {0} is outside 1..=255")]
    UnsupportedMaxval(u32),
    #[error("invalid image dimensions {0}x{1}")]
    InvalidDimensions(u32, u32),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    /// True when the rect is non-degenerate and lies inside a `width`x`height` raster.
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width as u64 && self.bottom() <= height as u64
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }

    /// Intersection over union; 0 when both rects are empty.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// 8-bit grayscale raster stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions(width, height));
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Image with every pixel set to `value`.
    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }
}

/// Luma conversion with the BT.601 weights.
pub fn rgb_to_gray(r: u8, g: u8, b: u8) -> u8 {
    let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    luma.round().clamp(0.0, 255.0) as u8
}

/// Summed-area tables over pixel values and their squares, zero padded to
/// `(width + 1) x (height + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegralImage {
    width: u32,
    height: u32,
    sums: Vec<u64>,
    squared_sums: Vec<u64>,
}

impl IntegralImage {
    pub fn new(img: &GrayImage) -> Self {
        let stride = img.width as usize + 1;
        let rows = img.height as usize + 1;
        let mut sums = vec![0u64; stride * rows];
        let mut squared_sums = vec![0u64; stride * rows];
        for y in 0..img.height as usize {
            let mut row = 0u64;
            let mut row_sq = 0u64;
            let src = &img.pixels[y * img.width as usize..(y + 1) * img.width as usize];
            for (x, &p) in src.iter().enumerate() {
                let p = p as u64;
                row += p;
                row_sq += p * p;
                let idx = (y + 1) * stride + x + 1;
                sums[idx] = sums[idx - stride] + row;
                squared_sums[idx] = squared_sums[idx - stride] + row_sq;
            }
        }
        IntegralImage {
            width: img.width + 1,
            height: img.height + 1,
            sums,
            squared_sums,
        }
    }

    /// Width of the table, one more than the source image.
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn image_width(&self) -> u32 {
        self.width - 1
    }

    pub fn image_height(&self) -> u32 {
        self.height - 1
    }

    /// Table entry: sum over rows `< y` and columns `< x`.
    #[inline]
    pub fn sum_at(&self, x: u32, y: u32) -> u64 {
        self.sums[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn squared_sum_at(&self, x: u32, y: u32) -> u64 {
        self.squared_sums[y as usize * self.width as usize + x as usize]
    }

    pub(crate) fn raw_sums(&self) -> &[u64] {
        &self.sums
    }

    pub(crate) fn raw_squared_sums(&self) -> &[u64] {
        &self.squared_sums
    }

    fn check(&self, r: &Rect) -> Result<(), ImageError> {
        if r.fits_within(self.image_width(), self.image_height()) {
            Ok(())
        } else {
            Err(ImageError::OutOfBounds(
                *r,
                self.image_width(),
                self.image_height(),
            ))
        }
    }

    pub fn rect_sum(&self, r: &Rect) -> Result<u64, ImageError> {
        self.check(r)?;
        Ok(self.rect_sum_unchecked(&self.sums, r))
    }

    pub fn rect_squared_sum(&self, r: &Rect) -> Result<u64, ImageError> {
        self.check(r)?;
        Ok(self.rect_sum_unchecked(&self.squared_sums, r))
    }

    #[inline]
    fn rect_sum_unchecked(&self, table: &[u64], r: &Rect) -> u64 {
        let stride = self.width as usize;
        let (x0, y0) = (r.x as usize, r.y as usize);
        let (x1, y1) = (x0 + r.w as usize, y0 + r.h as usize);
        // Adding before subtracting keeps every intermediate non-negative.
        table[y1 * stride + x1] + table[y0 * stride + x0]
            - table[y0 * stride + x1]
            - table[y1 * stride + x0]
    }
}

pub fn integral(img: &GrayImage) -> IntegralImage {
    IntegralImage::new(img)
}

pub fn rect_sum(ii: &IntegralImage, r: &Rect) -> Result<u64, ImageError> {
    ii.rect_sum(r)
}

pub fn crop(img: &GrayImage, r: &Rect) -> Result<GrayImage, ImageError> {
    if !r.fits_within(img.width, img.height) {
        return Err(ImageError::OutOfBounds(*r, img.width, img.height));
    }
    let mut pixels = Vec::with_capacity(r.area() as usize);
    for row in r.y..r.y + r.h {
        let start = row as usize * img.width as usize + r.x as usize;
        pixels.extend_from_slice(&img.pixels[start..start + r.w as usize]);
    }
    GrayImage::new(r.w, r.h, pixels)
}

/// Bilinear resampling with pixel-center alignment. Source coordinates are
/// clamped to the image, so edges replicate.
pub fn resize_bilinear(img: &GrayImage, width: u32, height: u32) -> Result<GrayImage, ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::EmptyDimensions(width, height));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let x_taps = bilinear_taps(img.width, width);
    let y_taps = bilinear_taps(img.height, height);
    let src_w = img.width as usize;
    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    for &(y0, y1, fy) in &y_taps {
        let row0 = &img.pixels[y0 * src_w..(y0 + 1) * src_w];
        let row1 = &img.pixels[y1 * src_w..(y1 + 1) * src_w];
        for &(x0, x1, fx) in &x_taps {
            let top = row0[x0] as f64 * (1.0 - fx) + row0[x1] as f64 * fx;
            let bottom = row1[x0] as f64 * (1.0 - fx) + row1[x1] as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(width, height, pixels)
}

fn bilinear_taps(src: u32, dst: u32) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor();
            let i0 = lo as usize;
            let i1 = (i0 + 1).min(src as usize - 1);
            (i0, i1, s - lo)
        })
        .collect()
}

/// Parses a binary (P5) PGM with maxval at most 255.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PgmError::UnsupportedMagic(shown));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::MalformedHeader("missing whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(PgmError::InvalidDimensions(width, height));
    }
    let expected = width as usize * height as usize;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            actual: data.len(),
        });
    }
    GrayImage::new(width, height, data[..expected].to_vec())
        .map_err(|_| PgmError::InvalidDimensions(width, height))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<u32, PgmError> {
    // Whitespace and comments may precede each token; at least one separator is required.
    let start = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    if *pos == start {
        return Err(PgmError::MalformedHeader(what));
    }
    let digits_start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if *pos == digits_start {
        return Err(PgmError::MalformedHeader(what));
    }
    std::str::from_utf8(&bytes[digits_start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PgmError::MalformedHeader(what))
}

/// Canonical encoding: `P5\n<w> <h>\n255\n` followed by the raw pixels.
pub fn save_pgm(img: &GrayImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.pixels);
    out
}
