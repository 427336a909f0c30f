//! End-to-end pipeline stages over a single run directory.
//!
//! ```text
//! <out>/data/                         synthetic dataset (unless dataset_root is set)
//! <out>/cache/crops/<clip>/{face,eyes,mouth}/frame_%05d.png, crops.json
//! <out>/split.json
//! <out>/keyframes/selector.json, selector_loss.csv, selector_batches.csv
//! <out>/keyframes/<clip>.json, heatmaps/<clip>.png
//! <out>/cache/flow/<clip>/{eyes,mouth}_flow/key_%02d.png, flow.json
//! <out>/model/{last,best}.json, loss.csv, validation.csv, batches.csv
//! <out>/eval/report.json, report.txt, predictions.json, plots/<clip>_{valence,arousal}.png
//! <out>/manifest.json
//! ```
//!
//! Every stage skips work whose outputs already exist unless `force` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    frame_file_name, generate_synthetic_dataset, load_dataset, make_split, normalize_label,
    ClipRecord, DatasetIndex, LabelMode, SplitSpec, SyntheticConfig,
};
use crate::flow::{flow_sequence, FlowConfig};
use crate::imaging::{draw_line, load_rgb, save_png, to_chw};
use crate::keyframe::{
    analyse_clip, class_of, render_heatmap, train_selector, SelectorClip, SelectorConfig,
    SelectorParams,
};
use crate::metrics::{evaluate, ClipSeries, MetricReport};
use crate::net::{AffectPrediction, NetConfig};
use crate::nn::Tensor4;
use crate::preprocess::{preprocess_frame, PreprocessConfig, Region};
use crate::train::{
    predict_clip, train_model, Checkpoint, ClipTensors, TrainConfig, BATCH_LOG, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const REGIONS: [Region; 3] = [Region::Face, Region::Eyes, Region::Mouth];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_clips: usize,
    pub frames_range: (usize, usize),
    pub width: u32,
    pub height: u32,
    pub fps: u32,
    pub mode: LabelMode,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            n_clips: d.n_clips,
            frames_range: d.frames_range,
            width: d.width,
            height: d.height,
            fps: d.fps,
            mode: d.mode,
        }
    }
}

impl SynthSection {
    pub fn with_seed(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_clips: self.n_clips,
            frames_range: self.frames_range,
            seed,
            width: self.width,
            height: self.height,
            fps: self.fps,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Existing dataset to use instead of `<out>/data`.
    pub dataset_root: Option<PathBuf>,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub preprocess: PreprocessConfig,
    pub selector: SelectorConfig,
    pub flow: FlowConfig,
    pub model: NetConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk scale: 200 synthetic clips, a narrow network and 40 epochs of
    /// small batches. Runs end to end in about 15 minutes on one core.
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_root: None,
            synth: SynthSection::default(),
            split: SplitSection::default(),
            preprocess: PreprocessConfig::default(),
            selector: SelectorConfig::default(),
            flow: FlowConfig::default(),
            model: NetConfig {
                channels: [4, 8, 16, 32, 32],
                fc: [64, 32],
                dropout: 0.1,
                ..NetConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 40,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.with_seed(self.seed).validate()?;
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config(
                "split.test_fraction must lie in (0, 1)".into(),
            ));
        }
        self.preprocess.validate()?;
        self.selector.validate()?;
        self.flow.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.selector.k != self.model.frames {
            return Err(Error::Config(format!(
                "selector.k ({}) must equal model.frames ({})",
                self.selector.k, self.model.frames
            )));
        }
        Ok(())
    }

    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?
        };
        Ok(cfg)
    }

    /// Applies `a.b.c=value`. The value is parsed as JSON when possible and
    /// taken as a string otherwise; the key must already exist.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                serde_json::Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?,
                serde_json::Value::Array(items) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| Error::Config(format!("bad index in `{key}`")))?,
                _ => {
                    return Err(Error::Config(format!(
                        "`{key}` does not name a config field"
                    )))
                }
            };
        }
        *slot = value;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: Option<RunConfig>,
    /// Paths relative to the run directory, per stage.
    pub artifacts: BTreeMap<String, Vec<PathBuf>>,
    /// Wall-clock seconds of the last execution of each stage.
    pub timings: BTreeMap<String, f64>,
}

/// What a stage did.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: &'static str,
    pub skipped: bool,
    pub summary: String,
}

pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn clip_error(clip_id: &str, e: Error) -> Error {
    Error::MalformedClip {
        clip_id: clip_id.to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropManifest {
    pub clip_id: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeManifest {
    pub clip_id: String,
    pub selected: Vec<usize>,
    pub marginal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowManifest {
    pub clip_id: String,
    pub selected: Vec<usize>,
}

impl Run {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
            force,
        })
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.config
            .dataset_root
            .clone()
            .unwrap_or_else(|| self.out.join("data"))
    }

    pub fn crops_dir(&self, clip_id: &str) -> PathBuf {
        self.out.join("cache").join("crops").join(clip_id)
    }

    pub fn crop_path(&self, clip_id: &str, region: Region, frame: usize) -> PathBuf {
        self.crops_dir(clip_id)
            .join(region.name())
            .join(frame_file_name(frame))
    }

    pub fn flow_dir(&self, clip_id: &str) -> PathBuf {
        self.out.join("cache").join("flow").join(clip_id)
    }

    pub fn flow_path(&self, clip_id: &str, region: Region, k: usize) -> PathBuf {
        self.flow_dir(clip_id)
            .join(format!("{}_flow", region.name()))
            .join(format!("key_{k:02}.png"))
    }

    pub fn keyframes_dir(&self) -> PathBuf {
        self.out.join("keyframes")
    }

    pub fn keyframe_manifest_path(&self, clip_id: &str) -> PathBuf {
        self.keyframes_dir().join(format!("{clip_id}.json"))
    }

    pub fn heatmap_path(&self, clip_id: &str) -> PathBuf {
        self.keyframes_dir()
            .join("heatmaps")
            .join(format!("{clip_id}.png"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.out.join("split.json")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out.join("model")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn report_path(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.out)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    }

    fn record(&self, stage: &str, artifacts: Vec<PathBuf>, seconds: f64) -> Result<()> {
        let path = self.out.join(MANIFEST_FILE);
        let mut m: RunManifest = if path.is_file() {
            read_json(&path)?
        } else {
            RunManifest::default()
        };
        m.version = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string();
        m.config = Some(self.config.clone());
        m.artifacts.insert(
            stage.to_string(),
            artifacts.iter().map(|p| self.rel(p)).collect(),
        );
        m.timings.insert(stage.to_string(), seconds);
        write_json(&path, &m)
    }

    fn load_index(&self) -> Result<DatasetIndex> {
        load_dataset(&self.dataset_root())
    }

    pub fn synth(&self) -> Result<StageReport> {
        let t0 = Instant::now();
        let root = self.dataset_root();
        let cfg = self.config.synth.with_seed(self.config.seed);
        let marker = root.join("synth.json");
        if !self.force
            && marker.is_file()
            && read_json::<SyntheticConfig>(&marker).ok() == Some(cfg)
        {
            return Ok(StageReport {
                stage: "synth",
                skipped: true,
                summary: format!("dataset at {} is current", root.display()),
            });
        }
        if root.exists() {
            std::fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        }
        let ds = generate_synthetic_dataset(&cfg, &root)?;
        write_json(&root.join("truth.json"), &ds.truth)?;
        write_json(&marker, &cfg)?;
        let frames: usize = ds.index.clips.iter().map(ClipRecord::len).sum();
        self.record(
            "synth",
            vec![root.clone(), marker],
            t0.elapsed().as_secs_f64(),
        )?;
        Ok(StageReport {
            stage: "synth",
            skipped: false,
            summary: format!(
                "{} clips, {frames} frames written to {}",
                ds.index.clips.len(),
                root.display()
            ),
        })
    }

    fn crops_complete(&self, clip: &ClipRecord) -> bool {
        let path = self.crops_dir(&clip.clip_id).join("crops.json");
        read_json::<CropManifest>(&path).is_ok_and(|m| m.frames == clip.len())
    }

    pub fn preprocess(&self) -> Result<StageReport> {
        let t0 = Instant::now();
        let index = self.load_index()?;
        let mut done = 0;
        let mut failures = Vec::new();
        for clip in &index.clips {
            if !self.force && self.crops_complete(clip) {
                continue;
            }
            if let Err(e) = self.preprocess_clip(clip) {
                log::error!("{}: {e}", clip.clip_id);
                failures.push(format!("{}: {e}", clip.clip_id));
                continue;
            }
            done += 1;
        }
        if !failures.is_empty() {
            return Err(Error::Invalid(format!(
                "preprocessing failed for {} clip(s): {}",
                failures.len(),
                failures.join("; ")
            )));
        }
        if done > 0 {
            self.record(
                "preprocess",
                vec![self.out.join("cache").join("crops")],
                t0.elapsed().as_secs_f64(),
            )?;
        }
        Ok(StageReport {
            stage: "preprocess",
            skipped: done == 0,
            summary: if done == 0 {
                format!("all {} clips cached", index.clips.len())
            } else {
                format!("{done} of {} clips preprocessed", index.clips.len())
            },
        })
    }

    fn preprocess_clip(&self, clip: &ClipRecord) -> Result<()> {
        let dir = self.crops_dir(&clip.clip_id);
        let manifest = dir.join("crops.json");
        if manifest.exists() {
            std::fs::remove_file(&manifest).map_err(|e| Error::io(&manifest, e))?;
        }
        for (f, (path, ann)) in clip.frames.iter().zip(&clip.annotations).enumerate() {
            let frame = load_rgb(path).map_err(|e| clip_error(&clip.clip_id, e))?;
            let crops = preprocess_frame(&frame, &ann.landmarks, &self.config.preprocess)
                .map_err(|e| clip_error(&clip.clip_id, e))?;
            for (region, crop) in REGIONS.iter().zip([&crops.face, &crops.eyes, &crops.mouth]) {
                save_png(&crop.image, &self.crop_path(&clip.clip_id, *region, f))?;
            }
        }
        write_json(
            &manifest,
            &CropManifest {
                clip_id: clip.clip_id.clone(),
                frames: clip.len(),
            },
        )
    }

    /// Loads or creates the train/test split.
    pub fn split(&self, index: &DatasetIndex) -> Result<SplitSpec> {
        let path = self.split_path();
        if path.is_file() {
            let s = SplitSpec::load(&path)?;
            let mut ids: Vec<String> = s.train_ids.iter().chain(&s.test_ids).cloned().collect();
            ids.sort();
            if ids == index.clip_ids() && s.seed == self.config.seed {
                return Ok(s);
            }
        }
        let s = make_split(index, self.config.split.test_fraction, self.config.seed)?;
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        s.save(&path)?;
        self.record("split", vec![path], 0.0)?;
        Ok(s)
    }

    fn face_tensor(&self, clip: &ClipRecord) -> Result<Tensor4<f32>> {
        if !self.crops_complete(clip) {
            return Err(Error::MissingArtifact(
                self.crops_dir(&clip.clip_id).join("crops.json"),
            ));
        }
        let mut data = Vec::with_capacity(clip.len() * 3 * 96 * 96);
        for f in 0..clip.len() {
            data.extend(to_chw(&load_rgb(&self.crop_path(
                &clip.clip_id,
                Region::Face,
                f,
            ))?));
        }
        Ok(Tensor4::from_vec(clip.len(), 3, 96, 96, data))
    }

    pub fn keyframes(&self) -> Result<StageReport> {
        let t0 = Instant::now();
        let index = self.load_index()?;
        let split = self.split(&index)?;
        let dir = self.keyframes_dir();
        let selector_path = dir.join("selector.json");
        let complete = selector_path.is_file()
            && index
                .clips
                .iter()
                .all(|c| self.keyframe_manifest_path(&c.clip_id).is_file());
        if !self.force && complete {
            return Ok(StageReport {
                stage: "keyframes",
                skipped: true,
                summary: "key-frame manifests are current".into(),
            });
        }

        let mut train = Vec::with_capacity(split.train_ids.len());
        for id in &split.train_ids {
            let clip = index
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("split names unknown clip {id}")))?;
            train.push(SelectorClip {
                clip_id: id.clone(),
                frames: self.face_tensor(clip)?,
                classes: clip
                    .annotations
                    .iter()
                    .map(|a| class_of(a.valence, a.arousal))
                    .collect(),
            });
        }
        let trained = train_selector(&train, &self.config.selector, self.config.stage_seed(1))?;
        drop(train);
        assert_hygiene(
            trained.batch_ids.iter().map(String::as_str),
            &split.test_ids,
            "selector",
        )?;
        write_json(&selector_path, &trained.params)?;
        let loss_csv: String = std::iter::once("step,loss\n".to_string())
            .chain(
                trained
                    .loss_trace
                    .iter()
                    .enumerate()
                    .map(|(i, l)| format!("{i},{l}\n")),
            )
            .collect();
        write_text(&dir.join("selector_loss.csv"), &loss_csv)?;
        let batch_csv: String = std::iter::once("step,clip_id\n".to_string())
            .chain(
                trained
                    .batch_ids
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("{i},{c}\n")),
            )
            .collect();
        write_text(&dir.join("selector_batches.csv"), &batch_csv)?;

        let mut artifacts = vec![
            selector_path,
            dir.join("selector_loss.csv"),
            dir.join("selector_batches.csv"),
        ];
        for clip in &index.clips {
            self.select_clip(&trained.params, clip)?;
            artifacts.push(self.keyframe_manifest_path(&clip.clip_id));
            artifacts.push(self.heatmap_path(&clip.clip_id));
        }
        self.record("keyframes", artifacts, t0.elapsed().as_secs_f64())?;
        Ok(StageReport {
            stage: "keyframes",
            skipped: false,
            summary: format!(
                "selector trained on {} clips; key frames chosen for {}",
                split.train_ids.len(),
                index.clips.len()
            ),
        })
    }

    fn select_clip(&self, params: &SelectorParams, clip: &ClipRecord) -> Result<()> {
        let frames = self.face_tensor(clip)?;
        let (imp, maps) = analyse_clip(params, &frames, self.config.selector.k)?;
        let top = (0..imp.frames)
            .max_by(|&a, &b| imp.marginal[a].total_cmp(&imp.marginal[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let face = load_rgb(&self.crop_path(&clip.clip_id, Region::Face, top))?;
        save_png(
            &render_heatmap(&face, &maps[top]),
            &self.heatmap_path(&clip.clip_id),
        )?;
        write_json(
            &self.keyframe_manifest_path(&clip.clip_id),
            &KeyframeManifest {
                clip_id: clip.clip_id.clone(),
                selected: imp.selected,
                marginal: imp.marginal,
            },
        )
    }

    pub fn keyframe_manifest(&self, clip_id: &str) -> Result<KeyframeManifest> {
        read_json(&self.keyframe_manifest_path(clip_id))
    }

    pub fn flow(&self) -> Result<StageReport> {
        let t0 = Instant::now();
        let index = self.load_index()?;
        let mut done = 0;
        for clip in &index.clips {
            let kf = self.keyframe_manifest(&clip.clip_id)?;
            let manifest_path = self.flow_dir(&clip.clip_id).join("flow.json");
            let current =
                read_json::<FlowManifest>(&manifest_path).is_ok_and(|m| m.selected == kf.selected);
            if current && !self.force {
                continue;
            }
            for region in [Region::Eyes, Region::Mouth] {
                let crops = kf
                    .selected
                    .iter()
                    .map(|&f| load_rgb(&self.crop_path(&clip.clip_id, region, f)))
                    .collect::<Result<Vec<_>>>()?;
                let encoded = flow_sequence(&crops, &self.config.flow)
                    .map_err(|e| clip_error(&clip.clip_id, e))?;
                for (k, enc) in encoded.iter().enumerate() {
                    save_png(&enc.to_rgb8(), &self.flow_path(&clip.clip_id, region, k))?;
                }
            }
            write_json(
                &manifest_path,
                &FlowManifest {
                    clip_id: clip.clip_id.clone(),
                    selected: kf.selected,
                },
            )?;
            done += 1;
        }
        if done > 0 {
            self.record(
                "flow",
                vec![self.out.join("cache").join("flow")],
                t0.elapsed().as_secs_f64(),
            )?;
        }
        Ok(StageReport {
            stage: "flow",
            skipped: done == 0,
            summary: if done == 0 {
                format!("all {} clips cached", index.clips.len())
            } else {
                format!("flow computed for {done} of {} clips", index.clips.len())
            },
        })
    }

    /// Key-frame crops, flow encodings and labels for one clip.
    pub fn clip_tensors(&self, clip: &ClipRecord) -> Result<ClipTensors> {
        let kf = self.keyframe_manifest(&clip.clip_id)?;
        let flow_manifest: FlowManifest =
            read_json(&self.flow_dir(&clip.clip_id).join("flow.json"))?;
        if flow_manifest.selected != kf.selected {
            return Err(Error::Invalid(format!(
                "{}: flow cache is stale",
                clip.clip_id
            )));
        }
        let bytes = |img: RgbImage| -> Vec<u8> {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw = img.into_raw();
            let mut out = vec![0u8; raw.len()];
            for c in 0..3 {
                for i in 0..w * h {
                    out[c * w * h + i] = raw[i * 3 + c];
                }
            }
            out
        };
        let mut rgb = Vec::new();
        let mut eye = Vec::new();
        let mut mouth = Vec::new();
        let mut labels = Vec::new();
        for (k, &f) in kf.selected.iter().enumerate() {
            rgb.extend(bytes(load_rgb(&self.crop_path(
                &clip.clip_id,
                Region::Face,
                f,
            ))?));
            eye.extend(bytes(load_rgb(&self.flow_path(
                &clip.clip_id,
                Region::Eyes,
                k,
            ))?));
            mouth.extend(bytes(load_rgb(&self.flow_path(
                &clip.clip_id,
                Region::Mouth,
                k,
            ))?));
            let a = &clip.annotations[f];
            labels.push([normalize_label(a.valence)?, normalize_label(a.arousal)?]);
        }
        Ok(ClipTensors {
            clip_id: clip.clip_id.clone(),
            frames: kf.selected,
            rgb,
            eye_flow: eye,
            mouth_flow: mouth,
            labels,
        })
    }

    fn tensors_for(&self, index: &DatasetIndex, ids: &[String]) -> Result<Vec<ClipTensors>> {
        ids.iter()
            .map(|id| {
                let clip = index
                    .get(id)
                    .ok_or_else(|| Error::Invalid(format!("split names unknown clip {id}")))?;
                self.clip_tensors(clip)
            })
            .collect()
    }

    pub fn train(&self) -> Result<StageReport> {
        let t0 = Instant::now();
        let index = self.load_index()?;
        let split = self.split(&index)?;
        let dir = self.model_dir();
        let last = dir.join(LAST_CHECKPOINT);
        if !self.force && last.is_file() {
            let ck = Checkpoint::load(&last)?;
            if ck.epoch >= self.config.train.epochs
                && ck.model.config == self.config.model
                && ck.train == self.config.train
            {
                return Ok(StageReport {
                    stage: "train",
                    skipped: true,
                    summary: format!("checkpoint already trained for {} epochs", ck.epoch),
                });
            }
        }
        let clips = self.tensors_for(&index, &split.train_ids)?;
        let outcome = train_model(
            &clips,
            &self.config.model,
            &self.config.train,
            self.config.stage_seed(2),
            &dir,
            !self.force,
        )?;
        let log = std::fs::read_to_string(dir.join(BATCH_LOG))
            .map_err(|e| Error::io(dir.join(BATCH_LOG), e))?;
        let logged = log
            .lines()
            .skip(1)
            .filter_map(|l| l.splitn(3, ',').nth(2))
            .flat_map(|ids| ids.split(';'));
        assert_hygiene(logged, &split.test_ids, "model")?;
        self.record(
            "train",
            vec![
                outcome.best.clone(),
                outcome.last.clone(),
                dir.join(crate::train::LOSS_LOG),
                dir.join(crate::train::VALIDATION_LOG),
                dir.join(BATCH_LOG),
            ],
            t0.elapsed().as_secs_f64(),
        )?;
        Ok(StageReport {
            stage: "train",
            skipped: false,
            summary: format!(
                "{} epochs, {} steps total, best validation loss {:.4}",
                outcome.epochs_run, outcome.steps, outcome.best_validation
            ),
        })
    }

    pub fn eval(&self) -> Result<StageReport> {
        let t0 = Instant::now();
        let report_path = self.report_path();
        if !self.force && report_path.is_file() {
            return Ok(StageReport {
                stage: "eval",
                skipped: true,
                summary: "report exists".into(),
            });
        }
        let index = self.load_index()?;
        let split = self.split(&index)?;
        let ck = Checkpoint::load(&self.model_dir().join(BEST_CHECKPOINT))?;
        let train = self.tensors_for(&index, &split.train_ids)?;
        let n: f64 = train.iter().map(|c| c.labels.len() as f64).sum();
        let mut train_mean = [0.0; 2];
        for l in train.iter().flat_map(|c| &c.labels) {
            train_mean[0] += l[0] / n;
            train_mean[1] += l[1] / n;
        }
        drop(train);
        let test = self.tensors_for(&index, &split.test_ids)?;
        let mut series = Vec::with_capacity(test.len());
        let mut predictions: Vec<AffectPrediction> = Vec::with_capacity(test.len());
        for clip in &test {
            let p = predict_clip(&ck.model, clip)?;
            series.push(ClipSeries {
                clip_id: clip.clip_id.clone(),
                pred: p.normalized.clone(),
                truth: clip.labels.clone(),
            });
            predictions.push(p);
        }
        let report = evaluate(&series, train_mean)?;
        let dir = self.eval_dir();
        write_json(&dir.join("predictions.json"), &predictions)?;
        write_text(&dir.join("report.txt"), &report.render_table())?;
        let mut artifacts = vec![dir.join("predictions.json"), dir.join("report.txt")];
        for s in &series {
            for (c, name) in ["valence", "arousal"].iter().enumerate() {
                let path = dir.join("plots").join(format!("{}_{name}.png", s.clip_id));
                let pred: Vec<f64> = s.pred.iter().map(|r| r[c]).collect();
                let truth: Vec<f64> = s.truth.iter().map(|r| r[c]).collect();
                save_png(&trace_plot(&pred, &truth), &path)?;
                artifacts.push(path);
            }
        }
        write_json(&report_path, &report)?;
        artifacts.push(report_path);
        self.record("eval", artifacts, t0.elapsed().as_secs_f64())?;
        Ok(StageReport {
            stage: "eval",
            skipped: false,
            summary: format!(
                "test CCC valence {:.3}, arousal {:.3} over {} frames",
                report.ccc_valence, report.ccc_arousal, report.n_frames
            ),
        })
    }

    pub fn load_report(&self) -> Result<MetricReport> {
        read_json(&self.report_path())
    }

    /// Renders the stored report; writes nothing.
    pub fn report(&self) -> Result<String> {
        Ok(self.load_report()?.render_table())
    }

    pub fn all(&self) -> Result<Vec<StageReport>> {
        Ok(vec![
            self.synth_if_needed()?,
            self.preprocess()?,
            self.keyframes()?,
            self.flow()?,
            self.train()?,
            self.eval()?,
        ])
    }

    fn synth_if_needed(&self) -> Result<StageReport> {
        if self.config.dataset_root.is_some() {
            return Ok(StageReport {
                stage: "synth",
                skipped: true,
                summary: "using external dataset".into(),
            });
        }
        self.synth()
    }
}

/// Fails if any logged training clip id belongs to the test split.
pub fn assert_hygiene<'a>(
    logged: impl Iterator<Item = &'a str>,
    test_ids: &[String],
    what: &str,
) -> Result<()> {
    let test: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
    let leaked: BTreeSet<&str> = logged.filter(|id| test.contains(id)).collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "{what} training saw test clips: {}",
            leaked.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }
}

/// Prediction (red) against ground truth (black) on the [0, 1] scale.
pub fn trace_plot(pred: &[f64], truth: &[f64]) -> RgbImage {
    const W: u32 = 320;
    const H: u32 = 160;
    const M: f64 = 12.0;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let grey = Rgb([200, 200, 200]);
    for frac in [0.0, 0.5, 1.0] {
        let y = M + (1.0 - frac) * (H as f64 - 2.0 * M);
        draw_line(&mut img, (M, y), (W as f64 - M, y), grey);
    }
    let n = pred.len().max(truth.len());
    let point = |i: usize, v: f64| {
        let x = M + if n > 1 {
            i as f64 / (n - 1) as f64
        } else {
            0.5
        } * (W as f64 - 2.0 * M);
        (x, M + (1.0 - v.clamp(0.0, 1.0)) * (H as f64 - 2.0 * M))
    };
    for (series, color) in [(truth, Rgb([0, 0, 0])), (pred, Rgb([220, 30, 30]))] {
        for i in 1..series.len() {
            draw_line(
                &mut img,
                point(i - 1, series[i - 1]),
                point(i, series[i]),
                color,
            );
        }
    }
    img
}
