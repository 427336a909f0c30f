//! Landmark-driven cropping and CLAHE illumination equalization.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{Landmarks, EYE_RANGE, MOUTH_RANGE};
use crate::imaging::{crop_resize, PixelBox, CROP_SIZE};
use crate::{Error, Result};

/// How far (px) landmarks may fall outside the frame before they are rejected
/// rather than clamped.
const LANDMARK_SLACK: f64 = 2.0;
/// Eye and mouth boxes are grown to at least this many pixels per side.
pub const REGION_MIN_SIDE: f64 = 4.0;
pub const REGION_MARGIN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Face,
    Eyes,
    Mouth,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Face => "face",
            Region::Eyes => "eyes",
            Region::Mouth => "mouth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCrop {
    pub region: Region,
    /// Always `CROP_SIZE x CROP_SIZE`.
    pub image: RgbImage,
    pub source_box: PixelBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheConfig {
    /// Histogram clip height in multiples of the uniform bin height.
    pub clip_limit: f64,
    /// `(rows, cols)` of contextual regions.
    pub tile_grid: (usize, usize),
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tile_grid: (8, 8),
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_limit >= 1.0) {
            return Err(Error::Config(format!("clip_limit {} < 1", self.clip_limit)));
        }
        if self.tile_grid.0 == 0 || self.tile_grid.1 == 0 {
            return Err(Error::Config(
                "tile grid dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn clamp_landmarks(landmarks: &Landmarks, width: u32, height: u32) -> Result<Vec<[f64; 2]>> {
    let (w, h) = (width as f64, height as f64);
    landmarks
        .iter()
        .map(|&[x, y]| {
            if x < -LANDMARK_SLACK
                || y < -LANDMARK_SLACK
                || x > w + LANDMARK_SLACK
                || y > h + LANDMARK_SLACK
            {
                Err(Error::Invalid(format!(
                    "landmark ({x:.1}, {y:.1}) outside {width}x{height} frame"
                )))
            } else {
                Ok([x.clamp(0.0, w), y.clamp(0.0, h)])
            }
        })
        .collect()
}

fn checked(bx: PixelBox) -> Result<PixelBox> {
    if bx.width() > 0.0 && bx.height() > 0.0 {
        Ok(bx)
    } else {
        Err(Error::DegenerateBox {
            x0: bx.x0,
            y0: bx.y0,
            x1: bx.x1,
            y1: bx.y1,
        })
    }
}

/// Landmark bounding box expanded by `margin` on each side, before clamping.
pub fn face_box(landmarks: &Landmarks, margin: f64) -> PixelBox {
    PixelBox::bounding(landmarks).expand(margin)
}

/// Crop covering all 68 landmarks plus `margin`, resized to 96x96.
pub fn crop_face(frame: &RgbImage, landmarks: &Landmarks, margin: f64) -> Result<RegionCrop> {
    let pts = clamp_landmarks(landmarks, frame.width(), frame.height())?;
    let tight = PixelBox::bounding(&pts);
    checked(tight)?;
    let bx = checked(tight.expand(margin).clamp_to(frame.width(), frame.height()))?;
    Ok(RegionCrop {
        region: Region::Face,
        image: crop_resize(frame, &bx, CROP_SIZE, CROP_SIZE),
        source_box: bx,
    })
}

/// Region box for a landmark index range: bounds plus 25% margin, each side
/// grown to at least [`REGION_MIN_SIDE`] around its center.
pub fn region_box(landmarks: &[[f64; 2]], range: std::ops::RangeInclusive<usize>) -> PixelBox {
    let mut bx = PixelBox::bounding(&landmarks[range]).expand(REGION_MARGIN);
    for (lo, hi) in [(&mut bx.x0, &mut bx.x1), (&mut bx.y0, &mut bx.y1)] {
        let side = *hi - *lo;
        if side < REGION_MIN_SIDE {
            let c = 0.5 * (*lo + *hi);
            *lo = c - REGION_MIN_SIDE / 2.0;
            *hi = c + REGION_MIN_SIDE / 2.0;
        }
    }
    bx
}

/// Eye (landmarks 36–47) and mouth (48–67) crops, each resized to 96x96.
pub fn extract_regions(
    frame: &RgbImage,
    landmarks: &Landmarks,
) -> Result<(RegionCrop, RegionCrop)> {
    let pts = clamp_landmarks(landmarks, frame.width(), frame.height())?;
    let crop = |region, range| -> Result<RegionCrop> {
        let bx = checked(region_box(&pts, range).clamp_to(frame.width(), frame.height()))?;
        Ok(RegionCrop {
            region,
            image: crop_resize(frame, &bx, CROP_SIZE, CROP_SIZE),
            source_box: bx,
        })
    };
    Ok((
        crop(Region::Eyes, EYE_RANGE)?,
        crop(Region::Mouth, MOUTH_RANGE)?,
    ))
}

/// Contrast-limited adaptive histogram equalization of an 8-bit plane.
pub fn clahe_plane(src: &[u8], width: usize, height: usize, cfg: &ClaheConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let (rows, cols) = cfg.tile_grid;
    if src.is_empty() || src.len() != width * height {
        return Err(Error::shape(
            format!("{width}x{height} plane"),
            format!("{} pixels", src.len()),
        ));
    }
    if rows > height || cols > width {
        return Err(Error::Config(format!(
            "tile grid {rows}x{cols} larger than {width}x{height} image"
        )));
    }
    let luts = tile_luts(src, width, height, rows, cols, Some(cfg.clip_limit));
    Ok(interpolate(src, width, height, rows, cols, &luts))
}

/// Tile edges: tile `i` spans `edges[i]..edges[i+1]`.
pub(crate) fn tile_edges(n: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|i| i * n / tiles).collect()
}

/// Per-tile lookup tables, row-major over the tile grid. `clip_limit = None`
/// disables clipping.
pub(crate) fn tile_luts(
    src: &[u8],
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
    clip_limit: Option<f64>,
) -> Vec<[u8; 256]> {
    let ys = tile_edges(height, rows);
    let xs = tile_edges(width, cols);
    let mut luts = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut hist = [0u32; 256];
            for y in ys[r]..ys[r + 1] {
                for &p in &src[y * width + xs[c]..y * width + xs[c + 1]] {
                    hist[p as usize] += 1;
                }
            }
            let total = ((ys[r + 1] - ys[r]) * (xs[c + 1] - xs[c])) as u32;
            if let Some(limit) = clip_limit.filter(|l| l.is_finite()) {
                clip_histogram(&mut hist, total, limit);
            }
            let mut lut = [0u8; 256];
            let mut cdf = 0u64;
            for (v, h) in hist.iter().enumerate() {
                cdf += *h as u64;
                lut[v] = ((cdf as f64 * 255.0 / total as f64).round()).min(255.0) as u8;
            }
            luts.push(lut);
        }
    }
    luts
}

/// Clips bins at `limit x (total / 256)` and spreads the excess evenly; any
/// remainder goes one count at a time to bins spaced across the range.
fn clip_histogram(hist: &mut [u32; 256], total: u32, limit: f64) {
    let ceiling = ((limit * total as f64 / 256.0).floor() as u32).max(1);
    let mut excess = 0u32;
    for h in hist.iter_mut() {
        if *h > ceiling {
            excess += *h - ceiling;
            *h = ceiling;
        }
    }
    let per_bin = excess / 256;
    for h in hist.iter_mut() {
        *h += per_bin;
    }
    let remainder = (excess % 256) as usize;
    if remainder > 0 {
        let step = 256 / remainder;
        for i in 0..remainder {
            hist[i * step] += 1;
        }
    }
}

/// Bilinear blend of the four surrounding tiles' mappings, anchored at tile
/// centers and clamped at the borders.
fn interpolate(
    src: &[u8],
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
    luts: &[[u8; 256]],
) -> Vec<u8> {
    let ys = tile_edges(height, rows);
    let xs = tile_edges(width, cols);
    let cy: Vec<f64> = (0..rows)
        .map(|r| 0.5 * (ys[r] + ys[r + 1]) as f64 - 0.5)
        .collect();
    let cx: Vec<f64> = (0..cols)
        .map(|c| 0.5 * (xs[c] + xs[c + 1]) as f64 - 0.5)
        .collect();
    let locate = |p: f64, centers: &[f64]| -> (usize, usize, f64) {
        if p <= centers[0] {
            return (0, 0, 0.0);
        }
        let last = centers.len() - 1;
        if p >= centers[last] {
            return (last, last, 0.0);
        }
        let i = centers.iter().rposition(|&c| c <= p).unwrap_or(0);
        let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, t)
    };
    let mut out = vec![0u8; src.len()];
    for y in 0..height {
        let (r0, r1, ty) = locate(y as f64, &cy);
        for x in 0..width {
            let (c0, c1, tx) = locate(x as f64, &cx);
            let v = src[y * width + x] as usize;
            let m = |r: usize, c: usize| luts[r * cols + c][v] as f64;
            let top = m(r0, c0) * (1.0 - tx) + m(r0, c1) * tx;
            let bottom = m(r1, c0) * (1.0 - tx) + m(r1, c1) * tx;
            out[y * width + x] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// CLAHE on the luma of a color image; chroma is carried through unchanged.
pub fn clahe(img: &RgbImage, cfg: &ClaheConfig) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut luma = Vec::with_capacity(w * h);
    let mut chroma = Vec::with_capacity(w * h);
    for p in img.pixels() {
        let [r, g, b] = p.0.map(|c| c as f64);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
        luma.push(y.round().clamp(0.0, 255.0) as u8);
        chroma.push((cb - 128.0, cr - 128.0));
    }
    let eq = clahe_plane(&luma, w, h, cfg)?;
    let mut out = RgbImage::new(img.width(), img.height());
    for (i, px) in out.pixels_mut().enumerate() {
        let y = eq[i] as f64;
        let (cb, cr) = chroma[i];
        let rgb = [
            y + 1.402 * cr,
            y - 0.344136 * cb - 0.714136 * cr,
            y + 1.772 * cb,
        ];
        *px = Rgb(rgb.map(|c| c.round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub face_margin: f64,
    pub clahe: ClaheConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            face_margin: 0.2,
            clahe: ClaheConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.face_margin >= 0.0) {
            return Err(Error::Config("face_margin must be nonnegative".into()));
        }
        self.clahe.validate()
    }
}

/// The three crops of one frame, each equalized after cropping.
#[derive(Debug, Clone)]
pub struct FrameCrops {
    pub face: RegionCrop,
    pub eyes: RegionCrop,
    pub mouth: RegionCrop,
}

pub fn preprocess_frame(
    frame: &RgbImage,
    landmarks: &Landmarks,
    cfg: &PreprocessConfig,
) -> Result<FrameCrops> {
    let mut face = crop_face(frame, landmarks, cfg.face_margin)?;
    let (mut eyes, mut mouth) = extract_regions(frame, landmarks)?;
    for crop in [&mut face, &mut eyes, &mut mouth] {
        crop.image = clahe(&crop.image, &cfg.clahe)?;
    }
    Ok(FrameCrops { face, eyes, mouth })
}
