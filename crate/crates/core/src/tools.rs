//! Zoom-in tool: cropping, resolution policy and observation encoding.

use std::sync::Arc;

use crate::error::{MedvrError, Result};
use crate::types::{validate_box, BoundingBox, VocabSpec};

/// Longest side allowed for the image the policy sees during training.
pub const MAX_TRAINING_SIDE: u32 = 1024;

/// Read-only grayscale image. Cloning shares the pixel buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageHandle {
    width: u32,
    height: u32,
    pixels: Arc<Vec<u8>>,
    source_id: u64,
}

impl ImageHandle {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, source_id: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MedvrError::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(MedvrError::InvalidArgument(format!(
                "expected {} pixels, got {}",
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels: Arc::new(pixels), source_id })
    }

    pub fn from_fn(width: u32, height: u32, source_id: u64, f: impl Fn(u32, u32) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for v in 0..height {
            for u in 0..width {
                pixels.push(f(u, v));
            }
        }
        Self::new(width, height, pixels, source_id).expect("dimensions checked by caller")
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn source_id(&self) -> u64 {
        self.source_id
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Intensity at column `u`, row `v`. Panics outside the image.
    pub fn get(&self, u: u32, v: u32) -> u8 {
        assert!(u < self.width && v < self.height, "pixel ({u},{v}) outside {}x{}", self.width, self.height);
        self.pixels[v as usize * self.width as usize + u as usize]
    }
}

/// Crops `b` out of `image`. The box must already be validated.
pub fn execute_zoom(image: &ImageHandle, b: &BoundingBox) -> Result<ImageHandle> {
    let b = validate_box(*b, image.width, image.height)?;
    let (x0, y0) = (b.x0 as u32, b.y0 as u32);
    Ok(ImageHandle::from_fn(b.width(), b.height(), image.source_id, |u, v| {
        image.get(x0 + u, y0 + v)
    }))
}

/// Output dimensions of [`training_resize`].
pub fn training_size(width: u32, height: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= MAX_TRAINING_SIDE {
        return (width, height);
    }
    let scale = MAX_TRAINING_SIDE as f64 / longest as f64;
    let fit = |d: u32| ((d as f64 * scale).round() as u32).max(1);
    (fit(width), fit(height))
}

/// Downscales so the longest side is at most 1024 (nearest-neighbour);
/// smaller images are returned unchanged.
pub fn training_resize(image: &ImageHandle) -> ImageHandle {
    let (w, h) = training_size(image.width, image.height);
    if (w, h) == (image.width, image.height) {
        return image.clone();
    }
    let sx = image.width as f64 / w as f64;
    let sy = image.height as f64 / h as f64;
    ImageHandle::from_fn(w, h, image.source_id, |u, v| {
        let ou = (((u as f64 + 0.5) * sx) as u32).min(image.width - 1);
        let ov = (((v as f64 + 0.5) * sy) as u32).min(image.height - 1);
        image.get(ou, ov)
    })
}

/// Maps a box in the policy's (possibly resized) view onto the original
/// image using the single resize factor, then clamps it.
pub fn view_to_original(
    view_box: &BoundingBox,
    view: (u32, u32),
    original: (u32, u32),
) -> Result<BoundingBox> {
    let factor = original.0.max(original.1) as f64 / view.0.max(view.1) as f64;
    let s = |c: i32| (c as f64 * factor).round() as i32;
    validate_box(
        BoundingBox::new(s(view_box.x0), s(view_box.y0), s(view_box.x1), s(view_box.y1)),
        original.0,
        original.1,
    )
}

/// Pooled, quantized observation layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationEncoding {
    pub pool_grid: u32,
    pub levels: u32,
}

impl Default for ObservationEncoding {
    fn default() -> Self {
        Self { pool_grid: 4, levels: 8 }
    }
}

impl ObservationEncoding {
    pub fn token_count(&self) -> usize {
        (self.pool_grid * self.pool_grid) as usize + 2
    }

    /// Cell `i` of `n` over a side of length `len`; never empty.
    fn cell_range(i: u32, n: u32, len: u32) -> (u32, u32) {
        let start = ((i as u64 * len as u64) / n as u64) as u32;
        let end = (((i + 1) as u64 * len as u64) / n as u64) as u32;
        let start = start.min(len - 1);
        (start, end.max(start + 1))
    }

    /// Quantized mean intensity of every pooling cell, row-major.
    pub fn pooled_levels(&self, crop: &ImageHandle) -> Vec<u32> {
        let n = self.pool_grid;
        let bin = 256 / self.levels as u64;
        let mut out = Vec::with_capacity((n * n) as usize);
        for cy in 0..n {
            let (y0, y1) = Self::cell_range(cy, n, crop.height);
            for cx in 0..n {
                let (x0, x1) = Self::cell_range(cx, n, crop.width);
                let mut sum = 0u64;
                for v in y0..y1 {
                    for u in x0..x1 {
                        sum += crop.get(u, v) as u64;
                    }
                }
                let count = ((x1 - x0) * (y1 - y0)) as u64;
                let level = (sum / (count * bin)).min(self.levels as u64 - 1);
                out.push(level as u32);
            }
        }
        out
    }
}

/// `OBS_START`, one level token per pooling cell (row-major), `OBS_END`.
pub fn encode_observation(crop: &ImageHandle, enc: &ObservationEncoding, vocab: &VocabSpec) -> Vec<u32> {
    let mut tokens = Vec::with_capacity(enc.token_count());
    tokens.push(vocab.special.obs_start);
    tokens.extend(enc.pooled_levels(crop).into_iter().map(|l| vocab.obs_level_token(l)));
    tokens.push(vocab.special.obs_end);
    tokens
}

/// Something a rollout can zoom into.
pub trait ZoomEnv: Send + Sync {
    /// Dimensions of the image the policy reasons over.
    fn view_size(&self) -> (u32, u32);
    /// Dimensions of the full-resolution image the tool crops from.
    fn original_size(&self) -> (u32, u32);
    /// Context tokens shown to the policy before generation starts.
    fn prompt_tokens(&self) -> Vec<u32>;
    /// Executes a zoom given a box in view coordinates. Returns the box in
    /// original coordinates and the observation tokens.
    fn zoom(&self, view_box: &BoundingBox) -> Result<(BoundingBox, Vec<u32>)>;
}

/// Standard Zoom-in tool over one image.
#[derive(Debug, Clone)]
pub struct ZoomTool {
    original: ImageHandle,
    view: ImageHandle,
    encoding: ObservationEncoding,
    vocab: VocabSpec,
}

impl ZoomTool {
    pub fn new(original: ImageHandle, encoding: ObservationEncoding, vocab: VocabSpec) -> Self {
        let view = training_resize(&original);
        Self { original, view, encoding, vocab }
    }

    pub fn original(&self) -> &ImageHandle {
        &self.original
    }
}

impl ZoomEnv for ZoomTool {
    fn view_size(&self) -> (u32, u32) {
        (self.view.width, self.view.height)
    }
    fn original_size(&self) -> (u32, u32) {
        (self.original.width, self.original.height)
    }
    fn prompt_tokens(&self) -> Vec<u32> {
        encode_observation(&self.view, &self.encoding, &self.vocab)
    }
    fn zoom(&self, view_box: &BoundingBox) -> Result<(BoundingBox, Vec<u32>)> {
        let view_box = validate_box(*view_box, self.view.width, self.view.height)?;
        let orig = view_to_original(&view_box, self.view_size(), self.original_size())?;
        let crop = execute_zoom(&self.original, &orig)?;
        Ok((orig, encode_observation(&crop, &self.encoding, &self.vocab)))
    }
}
