//! Parametric cartoon faces with analytically known labels and landmarks.
//!
//! Mouth curvature is an affine function of valence; eye openness and the
//! frame-to-frame jitter amplitude are affine functions of arousal. Labels
//! follow bounded random walks, or (in [`LabelMode::SignalWindow`]) hold one
//! emotion for the whole clip while the face only shows it inside a window.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    frame_file_name, load_dataset, write_annotations, AnnotationFile, DatasetIndex,
    FrameAnnotation, LANDMARK_COUNT, LEVEL_MAX, LEVEL_MIN,
};
use crate::imaging::save_png;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelMode {
    /// Labels start uniformly at random and move by at most one level per
    /// frame, with probability `step_prob`.
    RandomWalk { step_prob: f64 },
    /// Each clip carries one emotion label on every frame; the face shows it
    /// only on a contiguous window covering `fraction` of the frames and is
    /// neutral elsewhere.
    SignalWindow { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_clips: usize,
    pub frames_range: (usize, usize),
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub fps: u32,
    pub mode: LabelMode,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clips: 200,
            frames_range: (16, 40),
            seed: 0,
            width: 128,
            height: 128,
            fps: 30,
            mode: LabelMode::RandomWalk { step_prob: 0.35 },
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::Config("n_clips must be at least 1".into()));
        }
        let (lo, hi) = self.frames_range;
        if lo < 8 || hi > 200 || lo > hi {
            return Err(Error::Config(format!(
                "frames_range ({lo}, {hi}) must lie within [8, 200]"
            )));
        }
        if self.width < 96 || self.height < 96 {
            return Err(Error::Config(
                "synthetic frames must be at least 96x96".into(),
            ));
        }
        match self.mode {
            LabelMode::RandomWalk { step_prob } if !(0.0..=1.0).contains(&step_prob) => {
                Err(Error::Config("step_prob must lie in [0, 1]".into()))
            }
            LabelMode::SignalWindow { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(Error::Config("signal fraction must lie in (0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Everything needed to render one frame and place its landmarks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceParams {
    /// In [-1, 1]; positive bends the mouth corners up.
    pub mouth_curvature: f64,
    /// In (0, 1]; scales the eye aperture.
    pub eye_openness: f64,
    /// Bound (px) of this frame's positional jitter.
    pub motion_amplitude: f64,
    /// Lip separation in [0, 1].
    pub mouth_open: f64,
    pub head_center: [f64; 2],
    /// Face half-width in pixels.
    pub head_scale: f64,
    /// Largest label change allowed between consecutive frames.
    pub trajectory_smoothness: i32,
}

/// Per-clip colors and lighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceState {
    pub skin: [f64; 3],
    pub background: [f64; 3],
    pub gain: f64,
    pub gradient: [f64; 2],
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipTruth {
    pub clip_id: String,
    pub labels: Vec<(i32, i32)>,
    pub faces: Vec<SyntheticFaceParams>,
    pub landmarks: Vec<Vec<[f64; 2]>>,
    /// Half-open frame range where the face is expressive (signal mode only).
    pub signal_window: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub index: DatasetIndex,
    pub truth: Vec<ClipTruth>,
}

fn mouth_curvature_of(valence: f64) -> f64 {
    valence / 10.0
}

fn eye_openness_of(arousal: f64) -> f64 {
    0.55 + 0.045 * arousal
}

fn motion_amplitude_of(arousal: f64) -> f64 {
    0.5 + 0.1 * (arousal + 10.0)
}

fn mouth_open_of(arousal: f64) -> f64 {
    0.15 + 0.025 * (arousal + 10.0)
}

/// Label at the center of emotion-wheel sector `k` (1..=6) at radius 8.
pub fn class_sector_label(k: usize) -> (i32, i32) {
    assert!((1..=6).contains(&k), "sector index must be 1..=6");
    let theta = ((k - 1) as f64 * 60.0 + 30.0).to_radians();
    (
        (8.0 * theta.cos()).round() as i32,
        (8.0 * theta.sin()).round() as i32,
    )
}

struct Geometry {
    cx: f64,
    cy: f64,
    s: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_hw: f64,
    eye_hh: f64,
    mouth_y: f64,
    mouth_hw: f64,
    bend: f64,
    lip: f64,
    gap: f64,
}

impl Geometry {
    fn of(p: &SyntheticFaceParams) -> Self {
        let s = p.head_scale;
        let (cx, cy) = (p.head_center[0], p.head_center[1]);
        Self {
            cx,
            cy,
            s,
            eye_y: cy - 0.22 * s,
            eye_dx: 0.38 * s,
            eye_hw: 0.2 * s,
            eye_hh: 0.16 * s * p.eye_openness,
            mouth_y: cy + 0.55 * s,
            mouth_hw: 0.36 * s,
            bend: 0.2 * s * p.mouth_curvature,
            lip: 0.05 * s + 0.06 * s * p.mouth_open,
            gap: 0.06 * s * p.mouth_open,
        }
    }

    fn face_radii(&self) -> (f64, f64) {
        (self.s, 1.25 * self.s)
    }

    /// Mouth centerline at normalized abscissa `t` in [-1, 1].
    fn mouth_center(&self, t: f64) -> f64 {
        self.mouth_y - self.bend * (t * t - 0.5)
    }

    fn lip_half(&self, t: f64) -> f64 {
        self.lip * (1.0 - t * t).max(0.0).sqrt()
    }

    fn gap_half(&self, t: f64) -> f64 {
        self.gap * (1.0 - t * t).max(0.0)
    }
}

/// 68 landmarks in the conventional layout (jaw 0–16, brows 17–26, nose
/// 27–35, eyes 36–47, mouth 48–67).
pub fn landmarks_of(p: &SyntheticFaceParams) -> Vec<[f64; 2]> {
    let g = Geometry::of(p);
    let (rx, ry) = g.face_radii();
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..17 {
        let th = std::f64::consts::PI * (1.0 - k as f64 / 16.0);
        pts.push([g.cx + rx * th.cos(), g.cy + ry * th.sin()]);
    }
    for side in [-1.0, 1.0] {
        let bx = g.cx + side * g.eye_dx;
        for k in 0..5 {
            let t = (k as f64 - 2.0) / 2.0;
            pts.push([
                bx + t * 0.22 * g.s,
                g.eye_y - 0.24 * g.s - 0.03 * g.s * (1.0 - t * t),
            ]);
        }
    }
    for k in 0..4 {
        pts.push([g.cx, g.eye_y - 0.05 * g.s + k as f64 * (0.45 * g.s) / 3.0]);
    }
    for k in 0..5 {
        pts.push([g.cx + (k as f64 - 2.0) * 0.07 * g.s, g.cy + 0.25 * g.s]);
    }
    for side in [-1.0, 1.0] {
        let ex = g.cx + side * g.eye_dx;
        let (w, h) = (g.eye_hw, g.eye_hh);
        // Corner, two upper, corner, two lower; the second eye is mirrored.
        let pattern = [
            (-1.0, 0.0),
            (-1.0 / 3.0, -1.0),
            (1.0 / 3.0, -1.0),
            (1.0, 0.0),
            (1.0 / 3.0, 1.0),
            (-1.0 / 3.0, 1.0),
        ];
        for (px, py) in pattern {
            let px = if side < 0.0 { px } else { -px };
            let hh = h * (1.0 - px * px * 0.25);
            pts.push([ex + px * w, g.eye_y + py * hh]);
        }
    }
    let mx = |t: f64| g.cx + t * g.mouth_hw;
    let outer = |t: f64, up: bool| {
        let c = g.mouth_center(t);
        [
            mx(t),
            if up {
                c - g.lip_half(t)
            } else {
                c + g.lip_half(t)
            },
        ]
    };
    pts.push(outer(-1.0, true));
    for t in [-2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0] {
        pts.push(outer(t, true));
    }
    pts.push(outer(1.0, true));
    for t in [2.0 / 3.0, 1.0 / 3.0, 0.0, -1.0 / 3.0, -2.0 / 3.0] {
        pts.push(outer(t, false));
    }
    let inner = |t: f64, up: bool| {
        let c = g.mouth_center(t);
        [
            mx(t),
            if up {
                c - g.gap_half(t)
            } else {
                c + g.gap_half(t)
            },
        ]
    };
    pts.push(inner(-0.8, true));
    for t in [-0.4, 0.0, 0.4] {
        pts.push(inner(t, true));
    }
    pts.push(inner(0.8, true));
    for t in [0.4, 0.0, -0.4] {
        pts.push(inner(t, false));
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// Mouth bend measured from landmarks: mean height of the lip centers below
/// the corners, in units of the inter-corner half-width.
pub fn mouth_curvature_measure(landmarks: &[[f64; 2]]) -> f64 {
    let center = 0.5 * (landmarks[51][1] + landmarks[57][1]);
    let corners = 0.5 * (landmarks[48][1] + landmarks[54][1]);
    let half_width = 0.5 * (landmarks[54][0] - landmarks[48][0]);
    (center - corners) / half_width
}

#[inline]
fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

fn ellipse_sd(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = ((x - cx) / rx.max(1e-6), (y - cy) / ry.max(1e-6));
    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry).max(1e-6)
}

fn segment_sd(x: f64, y: f64, a: [f64; 2], b: [f64; 2], half_width: f64) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((x - a[0]) * vx + (y - a[1]) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (px, py) = (a[0] + t * vx - x, a[1] + t * vy - y);
    (px * px + py * py).sqrt() - half_width
}

fn blend(dst: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

/// Renders one frame. `rng` supplies sensor noise only.
pub fn render_face<R: Rng>(
    p: &SyntheticFaceParams,
    style: &FaceState,
    width: u32,
    height: u32,
    rng: &mut R,
) -> RgbImage {
    let g = Geometry::of(p);
    let (rx, ry) = g.face_radii();
    let lm = landmarks_of(p);
    let brows: Vec<[[f64; 2]; 2]> = [17usize, 22]
        .iter()
        .flat_map(|&b| (0..4).map(move |k| [b + k, b + k + 1]))
        .map(|[i, j]| [lm[i], lm[j]])
        .collect();
    let nose = [lm[27], lm[30]];
    let (w2, h2) = (width as f64 / 2.0, height as f64 / 2.0);
    let mut img = RgbImage::new(width, height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut c = style.background;
        blend(
            &mut c,
            style.skin,
            coverage(ellipse_sd(fx, fy, g.cx, g.cy, rx, ry)),
        );
        let shade = style.skin.map(|v| v * 0.72);
        for seg in &brows {
            blend(
                &mut c,
                [60.0, 40.0, 30.0],
                coverage(segment_sd(fx, fy, seg[0], seg[1], 0.035 * g.s)),
            );
        }
        blend(
            &mut c,
            shade,
            coverage(segment_sd(fx, fy, nose[0], nose[1], 0.03 * g.s)),
        );
        for side in [-1.0, 1.0] {
            let ex = g.cx + side * g.eye_dx;
            let sclera = coverage(ellipse_sd(fx, fy, ex, g.eye_y, g.eye_hw, g.eye_hh));
            blend(&mut c, [240.0, 240.0, 235.0], sclera);
            let pupil = coverage(ellipse_sd(fx, fy, ex, g.eye_y, 0.08 * g.s, 0.08 * g.s));
            blend(&mut c, [25.0, 20.0, 20.0], pupil.min(sclera));
        }
        let t = (fx - g.cx) / g.mouth_hw;
        if t.abs() <= 1.1 {
            let tc = t.clamp(-1.0, 1.0);
            let centre = g.mouth_center(tc);
            let dy = (fy - centre).abs();
            let taper = if t.abs() > 1.0 {
                (t.abs() - 1.0) * g.mouth_hw
            } else {
                0.0
            };
            let lip = g.lip_half(tc).max(0.02 * g.s);
            blend(&mut c, [165.0, 45.0, 55.0], coverage(dy + taper - lip));
            let gap = g.gap_half(tc);
            if gap > 0.0 {
                blend(&mut c, [40.0, 10.0, 15.0], coverage(dy + taper - gap));
            }
        }
        let light = style.gain
            * (1.0 + style.gradient[0] * (fx - w2) / w2 + style.gradient[1] * (fy - h2) / h2);
        let noise: f64 = if style.noise > 0.0 {
            rng.gen_range(-style.noise..=style.noise)
        } else {
            0.0
        };
        *px = Rgb(c.map(|v| (v * light + noise).round().clamp(0.0, 255.0) as u8));
    }
    img
}

fn random_style<R: Rng>(rng: &mut R) -> FaceState {
    let tone = rng.gen_range(0.75..1.0);
    FaceState {
        skin: [225.0 * tone, 180.0 * tone, 150.0 * tone],
        background: [
            rng.gen_range(30.0..90.0),
            rng.gen_range(40.0..100.0),
            rng.gen_range(50.0..110.0),
        ],
        gain: rng.gen_range(0.6..1.1),
        gradient: [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)],
        noise: 3.0,
    }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn face_for<R: Rng>(
    valence: f64,
    arousal: f64,
    base: [f64; 2],
    scale: f64,
    amp_scale: f64,
    rng: &mut R,
) -> SyntheticFaceParams {
    let amp = motion_amplitude_of(arousal) * amp_scale;
    let mut j = || rng.gen_range(-1.0..=1.0);
    SyntheticFaceParams {
        mouth_curvature: (mouth_curvature_of(valence) + 0.02 * j()).clamp(-1.0, 1.0),
        eye_openness: (eye_openness_of(arousal) + 0.02 * amp * j()).clamp(0.05, 1.0),
        motion_amplitude: amp,
        mouth_open: (mouth_open_of(arousal) + 0.05 * amp * j()).clamp(0.0, 1.0),
        head_center: [base[0] + amp * j(), base[1] + amp * j()],
        head_scale: scale,
        trajectory_smoothness: 1,
    }
}

fn generate_clip(cfg: &SyntheticConfig, i: usize, out: &Path) -> Result<ClipTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    let clip_id = format!("clip_{i:04}");
    let n = rng.gen_range(cfg.frames_range.0..=cfg.frames_range.1);
    let style = random_style(&mut rng);
    let scale = rng.gen_range(36.0..42.0) * cfg.width.min(cfg.height) as f64 / 128.0;
    let base = [
        cfg.width as f64 / 2.0 + rng.gen_range(-4.0..4.0),
        cfg.height as f64 * 0.45 + rng.gen_range(-4.0..4.0),
    ];

    let mut labels = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    let mut signal_window = None;
    match cfg.mode {
        LabelMode::RandomWalk { step_prob } => {
            let mut v = rng.gen_range(LEVEL_MIN..=LEVEL_MAX);
            let mut a = rng.gen_range(LEVEL_MIN..=LEVEL_MAX);
            for f in 0..n {
                if f > 0 {
                    for level in [&mut v, &mut a] {
                        if rng.gen_bool(step_prob) {
                            let step = if rng.gen_bool(0.5) { 1 } else { -1 };
                            *level = (*level + step).clamp(LEVEL_MIN, LEVEL_MAX);
                        }
                    }
                }
                labels.push((v, a));
                faces.push(face_for(v as f64, a as f64, base, scale, 1.0, &mut rng));
            }
        }
        LabelMode::SignalWindow { fraction } => {
            let (v, a) = class_sector_label(rng.gen_range(1..=6));
            let len = ((n as f64 * fraction).round() as usize).clamp(1, n);
            let start = rng.gen_range(0..=n - len);
            signal_window = Some((start, start + len));
            for f in 0..n {
                labels.push((v, a));
                let face = if (start..start + len).contains(&f) {
                    face_for(v as f64, a as f64, base, scale, 1.0, &mut rng)
                } else {
                    face_for(0.0, 0.0, base, scale, 0.3, &mut rng)
                };
                faces.push(face);
            }
        }
    }

    let dir = out.join(&clip_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ann = AnnotationFile {
        fps: cfg.fps,
        frames: Default::default(),
    };
    let mut landmarks = Vec::with_capacity(n);
    for (f, (face, &(v, a))) in faces.iter().zip(&labels).enumerate() {
        let img = render_face(face, &style, cfg.width, cfg.height, &mut rng);
        save_png(&img, &dir.join(frame_file_name(f)))?;
        let lm: Vec<[f64; 2]> = landmarks_of(face)
            .into_iter()
            .map(|[x, y]| {
                [
                    round3(x.clamp(0.0, cfg.width as f64)),
                    round3(y.clamp(0.0, cfg.height as f64)),
                ]
            })
            .collect();
        ann.frames.insert(
            f,
            FrameAnnotation {
                valence: v,
                arousal: a,
                landmarks: lm.clone(),
            },
        );
        landmarks.push(lm);
    }
    write_annotations(&dir, &ann)?;
    Ok(ClipTruth {
        clip_id,
        labels,
        faces,
        landmarks,
        signal_window,
    })
}

/// Writes `cfg.n_clips` clips under `out` in the loader's format and returns
/// the reloaded index alongside the generator's ground truth.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, out: &Path) -> Result<SyntheticDataset> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let truth = (0..cfg.n_clips)
        .map(|i| generate_clip(cfg, i, out))
        .collect::<Result<Vec<_>>>()?;
    let index = load_dataset(out)?;
    Ok(SyntheticDataset { index, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neutral(center: [f64; 2]) -> SyntheticFaceParams {
        SyntheticFaceParams {
            mouth_curvature: 0.0,
            eye_openness: 0.55,
            motion_amplitude: 0.0,
            mouth_open: 0.3,
            head_center: center,
            head_scale: 40.0,
            trajectory_smoothness: 1,
        }
    }

    #[test]
    fn landmark_layout() {
        let lm = landmarks_of(&neutral([64.0, 58.0]));
        assert_eq!(lm.len(), 68);
        // Image-left eye lies left of the image-right eye; mouth below eyes.
        let eye_l = lm[36..42].iter().map(|p| p[0]).sum::<f64>() / 6.0;
        let eye_r = lm[42..48].iter().map(|p| p[0]).sum::<f64>() / 6.0;
        assert!(eye_l < eye_r);
        assert!(lm[48..68].iter().all(|p| p[1] > lm[36][1]));
        // Chin is the lowest jaw point.
        assert!(lm[..17].iter().all(|p| p[1] <= lm[8][1] + 1e-9));
    }

    #[test]
    fn mouth_measure_is_affine_in_curvature() {
        let mut p = neutral([60.0, 60.0]);
        let mut prev = f64::NEG_INFINITY;
        for k in -5..=5 {
            p.mouth_curvature = k as f64 / 5.0;
            let m = mouth_curvature_measure(&landmarks_of(&p));
            let expect = 0.2 * 40.0 * p.mouth_curvature / (0.36 * 40.0);
            assert!((m - expect).abs() < 1e-12);
            assert!(m > prev);
            prev = m;
        }
    }

    #[test]
    fn sector_labels_fall_in_their_sector() {
        for k in 1..=6 {
            let (v, a) = class_sector_label(k);
            let ang = (a as f64).atan2(v as f64).rem_euclid(std::f64::consts::TAU);
            assert_eq!(1 + (ang / std::f64::consts::TAU * 6.0).floor() as usize, k);
            assert!(((v * v + a * a) as f64).sqrt() > 2.5);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SyntheticConfig::default();
        assert!(c.validate().is_ok());
        c.n_clips = 0;
        assert!(c.validate().is_err());
        c.n_clips = 1;
        c.frames_range = (4, 10);
        assert!(c.validate().is_err());
        c.frames_range = (8, 201);
        assert!(c.validate().is_err());
    }

    #[test]
    fn render_is_deterministic_and_shows_mouth() {
        let p = neutral([64.0, 58.0]);
        let style = FaceState {
            skin: [220.0, 180.0, 150.0],
            background: [50.0, 60.0, 70.0],
            gain: 1.0,
            gradient: [0.0, 0.0],
            noise: 0.0,
        };
        let a = render_face(&p, &style, 128, 128, &mut ChaCha8Rng::seed_from_u64(0));
        let b = render_face(&p, &style, 128, 128, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let lm = landmarks_of(&p);
        let m = lm[51];
        let px = a.get_pixel(m[0] as u32, (m[1] + 1.0) as u32);
        assert!(px[0] > px[1] + 60, "mouth pixel {px:?}");
    }
}
