//! Clip/annotation on-disk format, label normalization, splitting and the
//! synthetic face-clip generator.
//!
//! Layout: `<root>/<clip_id>/frame_%05d.png` plus `<root>/<clip_id>/annotations.json`:
//!
//! ```json
//! {"fps": 30, "frames": {"0": {"valence": 3, "arousal": -2, "landmarks": [[x, y], ...]}}}
//! ```

mod split;
mod synth;

pub use split::{chi_square_distance, make_split, make_split_traced, SplitSpec, VaHistogram};
pub use synth::{
    class_sector_label, generate_synthetic_dataset, landmarks_of, mouth_curvature_measure,
    render_face, ClipTruth, FaceState, LabelMode, SyntheticConfig, SyntheticDataset,
    SyntheticFaceParams,
};

use std::collections::{BTreeMap, HashSet};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;
pub const EYE_RANGE: RangeInclusive<usize> = 36..=47;
pub const MOUTH_RANGE: RangeInclusive<usize> = 48..=67;
pub const LEVEL_MIN: i32 = -10;
pub const LEVEL_MAX: i32 = 10;
/// Number of distinct annotation levels.
pub const LEVELS: usize = 21;
pub const ANNOTATION_FILE: &str = "annotations.json";

/// 68 `(x, y)` points in raw-frame pixels.
pub type Landmarks = [[f64; 2]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnnotation {
    pub valence: i32,
    pub arousal: i32,
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub fps: u32,
    pub frames: BTreeMap<usize, FrameAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Frame image paths in chronological order.
    pub frames: Vec<PathBuf>,
    pub annotations: Vec<FrameAnnotation>,
    pub fps: u32,
    pub width: u32,
    pub height: u32,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Per-frame labels on the [0, 1] scale, `(valence, arousal)`.
    pub fn normalized_labels(&self) -> Vec<[f64; 2]> {
        self.annotations
            .iter()
            .map(|a| {
                [
                    normalize_unchecked(a.valence),
                    normalize_unchecked(a.arousal),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted by `clip_id`.
    pub clips: Vec<ClipRecord>,
}

impl DatasetIndex {
    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.clips
            .binary_search_by(|c| c.clip_id.as_str().cmp(clip_id))
            .ok()
            .map(|i| &self.clips[i])
    }

    pub fn clip_ids(&self) -> Vec<String> {
        self.clips.iter().map(|c| c.clip_id.clone()).collect()
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

fn parse_frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    (digits.len() >= 5 && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

pub fn check_level(level: i32) -> Result<i32> {
    if (LEVEL_MIN..=LEVEL_MAX).contains(&level) {
        Ok(level)
    } else {
        Err(Error::LevelOutOfRange(level as i64))
    }
}

/// Min-max normalization of a level: `(level + 10) / 20`.
pub fn normalize_label(level: i32) -> Result<f64> {
    check_level(level).map(normalize_unchecked)
}

fn normalize_unchecked(level: i32) -> f64 {
    (level - LEVEL_MIN) as f64 / (LEVEL_MAX - LEVEL_MIN) as f64
}

/// Inverse of [`normalize_label`], defined on the whole real line.
pub fn denormalize_label(x: f64) -> f64 {
    x * (LEVEL_MAX - LEVEL_MIN) as f64 + LEVEL_MIN as f64
}

fn load_clip(dir: &Path, clip_id: &str) -> Result<ClipRecord> {
    let ann_path = dir.join(ANNOTATION_FILE);
    if !ann_path.is_file() {
        return Err(Error::MissingAnnotations {
            clip_id: clip_id.to_string(),
            path: ann_path,
        });
    }
    let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| Error::json(&ann_path, e))?;

    let mut frame_indices = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_frame_index) {
            frame_indices.push(i);
        }
    }
    frame_indices.sort_unstable();

    if frame_indices.len() != file.frames.len() {
        return Err(Error::CountMismatch {
            clip_id: clip_id.to_string(),
            frames: frame_indices.len(),
            annotations: file.frames.len(),
        });
    }
    if frame_indices.len() < 2 {
        return Err(Error::MalformedClip {
            clip_id: clip_id.to_string(),
            reason: format!("needs at least 2 frames, found {}", frame_indices.len()),
        });
    }
    for (expect, (&got, &key)) in frame_indices.iter().zip(file.frames.keys()).enumerate() {
        if got != expect || key != expect {
            return Err(Error::MalformedClip {
                clip_id: clip_id.to_string(),
                reason: format!("frame numbering is not contiguous from 0 (at position {expect})"),
            });
        }
    }

    let frames: Vec<PathBuf> = frame_indices
        .iter()
        .map(|&i| dir.join(frame_file_name(i)))
        .collect();
    let (width, height) =
        image::image_dimensions(&frames[0]).map_err(|e| Error::image(&frames[0], e))?;

    let mut annotations = Vec::with_capacity(frames.len());
    for (frame, ann) in file.frames.into_values().enumerate() {
        for (what, value) in [("valence", ann.valence), ("arousal", ann.arousal)] {
            if check_level(value).is_err() {
                return Err(Error::LabelRange {
                    clip_id: clip_id.to_string(),
                    frame,
                    what,
                    value: value as i64,
                });
            }
        }
        if ann.landmarks.len() != LANDMARK_COUNT {
            return Err(Error::LandmarkCount {
                clip_id: clip_id.to_string(),
                frame,
                found: ann.landmarks.len(),
            });
        }
        let inside = ann.landmarks.iter().all(|&[x, y]| {
            x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x <= width as f64
                && y <= height as f64
        });
        if !inside {
            return Err(Error::MalformedClip {
                clip_id: clip_id.to_string(),
                reason: format!("frame {frame}: landmark outside {width}x{height} frame"),
            });
        }
        annotations.push(ann);
    }

    Ok(ClipRecord {
        clip_id: clip_id.to_string(),
        frames,
        annotations,
        fps: file.fps,
        width,
        height,
    })
}

/// Loads every clip directory under `root`. The first malformed clip aborts
/// the load with an error naming it.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry
            .file_type()
            .map_err(|e| Error::io(entry.path(), e))?
            .is_dir()
        {
            let name = entry.file_name().to_string_lossy().into_owned();
            dirs.push((name, entry.path()));
        }
    }
    dirs.sort();
    let mut seen = HashSet::new();
    let mut clips = Vec::with_capacity(dirs.len());
    for (clip_id, dir) in dirs {
        if !seen.insert(clip_id.clone()) {
            return Err(Error::Invalid(format!("duplicate clip id {clip_id}")));
        }
        clips.push(load_clip(&dir, &clip_id)?);
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        clips,
    })
}

pub fn write_annotations(dir: &Path, file: &AnnotationFile) -> Result<()> {
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string(file).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_label(-10).unwrap(), 0.0);
        assert_eq!(normalize_label(10).unwrap(), 1.0);
        assert_eq!(normalize_label(0).unwrap(), 0.5);
        assert!(normalize_label(11).is_err());
        assert!(normalize_label(-11).is_err());
        assert_eq!(denormalize_label(0.5), 0.0);
    }

    #[test]
    fn normalization_round_trips_exactly() {
        for level in LEVEL_MIN..=LEVEL_MAX {
            assert_eq!(
                denormalize_label(normalize_label(level).unwrap()),
                level as f64
            );
        }
    }

    #[test]
    fn frame_names() {
        assert_eq!(frame_file_name(7), "frame_00007.png");
        assert_eq!(parse_frame_index("frame_00042.png"), Some(42));
        assert_eq!(parse_frame_index("frame_42.png"), None);
        assert_eq!(parse_frame_index("thumb.png"), None);
    }
}
