//! Mini-batch training of [`AffectNet`] with validation-driven checkpoints,
//! a reduce-on-plateau schedule and exact resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::ccc_loss;
use crate::net::{
    loss_and_gradients, AffectNet, AffectPrediction, ClipBatch, FilterVec, Mode, Model, NetConfig,
    INPUT_SIZE,
};
use crate::nn::{Adam, AdamConfig, Tensor4};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LAST_CHECKPOINT: &str = "last.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const LOSS_LOG: &str = "loss.csv";
pub const VALIDATION_LOG: &str = "validation.csv";
pub const BATCH_LOG: &str = "batches.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Share of training clips held out for checkpoint selection.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 200,
            plateau_factor: 0.5,
            plateau_patience: 10,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs and plateau_patience must be positive".into(),
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without a new best validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub lr: f64,
    pub best: f64,
    pub stagnant: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            lr,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    /// Records one epoch's metric; returns true if it is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.stagnant = 0;
            return true;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            self.lr *= self.factor;
            self.stagnant = 0;
        }
        false
    }
}

/// Key-frame tensors of one clip, stored as bytes (`frames x 3 x 96 x 96`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensors {
    pub clip_id: String,
    pub frames: Vec<usize>,
    pub rgb: Vec<u8>,
    pub eye_flow: Vec<u8>,
    pub mouth_flow: Vec<u8>,
    /// Normalized `(valence, arousal)` per key frame.
    pub labels: Vec<[f64; 2]>,
}

fn to_tensor(parts: &[&[u8]]) -> Tensor4<f32> {
    let per = 3 * INPUT_SIZE * INPUT_SIZE;
    let n = parts.iter().map(|p| p.len()).sum::<usize>() / per;
    let data = parts
        .iter()
        .flat_map(|p| p.iter().map(|&b| b as f32 / 255.0))
        .collect();
    Tensor4::from_vec(n, 3, INPUT_SIZE, INPUT_SIZE, data)
}

pub fn make_batch(clips: &[&ClipTensors]) -> (ClipBatch<f32>, Vec<[f64; 2]>) {
    let gather =
        |f: fn(&ClipTensors) -> &[u8]| to_tensor(&clips.iter().map(|c| f(c)).collect::<Vec<_>>());
    let batch = ClipBatch {
        clips: clips.len(),
        rgb: gather(|c| &c.rgb),
        eye_flow: gather(|c| &c.eye_flow),
        mouth_flow: gather(|c| &c.mouth_flow),
    };
    let labels = clips
        .iter()
        .flat_map(|c| c.labels.iter().copied())
        .collect();
    (batch, labels)
}

/// Eval-mode prediction for one clip.
pub fn predict_clip(model: &Model, clip: &ClipTensors) -> Result<AffectPrediction> {
    let (batch, _) = make_batch(&[clip]);
    let pred = model.forward(&batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(AffectPrediction::new(
        &clip.clip_id,
        clip.frames.clone(),
        pred,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: usize,
    pub model: Model,
    pub optimizer: Adam<f32>,
    pub filter_optimizer: Adam<f64>,
    pub scheduler: Plateau,
    pub best_validation: f64,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::json(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_validation: f64,
}

/// Seeded split of the training clips into fit and validation parts. At
/// least one clip is always kept for fitting.
pub fn validation_split(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a1d));
    let n_val = ((ids.len() as f64 * fraction).round() as usize).min(ids.len().saturating_sub(1));
    let mut val = order.split_off(ids.len() - n_val);
    order.sort();
    val.sort();
    (order, val)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Loss over all validation frames in eval mode.
pub fn validation_loss(model: &Model, clips: &[&ClipTensors]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for c in clips {
        pred.extend(predict_clip(model, c)?.normalized);
        truth.extend(c.labels.iter().copied());
    }
    ccc_loss(&pred, &truth)
}

/// Keeps the header and rows whose first column is below `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < epoch);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains on `clips`, writing checkpoints and logs under `dir`. With
/// `resume`, continues from `dir/last.json` when present.
pub fn train_model(
    clips: &[ClipTensors],
    net: &NetConfig,
    cfg: &TrainConfig,
    seed: u64,
    dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if clips.is_empty() {
        return Err(Error::Invalid("no training clips".into()));
    }
    for c in clips {
        if c.labels.len() != net.frames {
            return Err(Error::shape(
                format!("{} key frames", net.frames),
                format!("{} in {}", c.labels.len(), c.clip_id),
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (last_path, best_path) = (dir.join(LAST_CHECKPOINT), dir.join(BEST_CHECKPOINT));
    let logs = [
        dir.join(LOSS_LOG),
        dir.join(VALIDATION_LOG),
        dir.join(BATCH_LOG),
    ];

    let ids: Vec<String> = clips.iter().map(|c| c.clip_id.clone()).collect();
    let mut state = if resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        if ck.model.config != *net || ck.train != *cfg || ck.seed != seed {
            return Err(Error::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        ck
    } else {
        let model = AffectNet::init(net, seed)?;
        let (train_ids, validation_ids) = validation_split(&ids, cfg.validation_fraction, seed);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            train: cfg.clone(),
            epoch: 0,
            steps: 0,
            optimizer: Adam::new(&model, AdamConfig::default()),
            filter_optimizer: Adam::new(&FilterVec::of(&model.filters), AdamConfig::default()),
            model,
            scheduler: Plateau::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience),
            best_validation: f64::INFINITY,
            train_ids,
            validation_ids,
        }
    };
    for log in &logs {
        if state.epoch == 0 {
            if log.exists() {
                std::fs::remove_file(log).map_err(|e| Error::io(log, e))?;
            }
        } else {
            truncate_log(log, state.epoch)?;
        }
    }

    let by_id = |wanted: &[String]| -> Result<Vec<&ClipTensors>> {
        wanted
            .iter()
            .map(|id| {
                clips
                    .iter()
                    .find(|c| &c.clip_id == id)
                    .ok_or_else(|| Error::Invalid(format!("clip {id} missing from training set")))
            })
            .collect()
    };
    let fit = by_id(&state.train_ids)?;
    let val = by_id(&state.validation_ids)?;

    let start = state.epoch;
    for epoch in start..cfg.epochs {
        let mut rng = epoch_rng(seed, epoch);
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<&ClipTensors> = chunk.iter().map(|&i| fit[i]).collect();
            let (batch, labels) = make_batch(&members);
            let Some((loss, grads, cache)) =
                loss_and_gradients(&state.model, &batch, &labels, &mut rng)?
            else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let lr = state.scheduler.lr;
            state.model.commit_bn_stats(&cache);
            drop(cache);
            state.optimizer.step(&mut state.model, &grads.net, lr);
            let mut fv = FilterVec::of(&state.model.filters);
            state
                .filter_optimizer
                .step(&mut fv, &FilterVec::of_grads(&grads.filters), lr);
            fv.write_to(&mut state.model.filters);
            let step = state.steps;
            state.steps += 1;
            epoch_loss.push(loss);
            append(
                &logs[0],
                "epoch,step,loss,lr",
                &format!("{epoch},{step},{loss},{lr}"),
            )?;
            let names: Vec<&str> = members.iter().map(|c| c.clip_id.as_str()).collect();
            append(
                &logs[2],
                "epoch,step,clip_ids",
                &format!("{epoch},{step},{}", names.join(";")),
            )?;
        }

        let metric = if val.is_empty() {
            epoch_loss.iter().sum::<f64>() / epoch_loss.len().max(1) as f64
        } else {
            validation_loss(&state.model, &val)?
        };
        let lr_before = state.scheduler.lr;
        let improved = state.scheduler.observe(metric);
        append(
            &logs[1],
            "epoch,validation_loss,lr",
            &format!("{epoch},{metric},{lr_before}"),
        )?;
        log::info!(
            "epoch {epoch}: train {:.4} validation {metric:.4} lr {lr_before:.2e}",
            epoch_loss.iter().sum::<f64>() / epoch_loss.len().max(1) as f64
        );
        state.epoch = epoch + 1;
        if improved {
            state.best_validation = metric;
            state.save(&best_path)?;
        }
        state.save(&last_path)?;
    }
    if !best_path.exists() {
        state.save(&best_path)?;
    }
    Ok(TrainOutcome {
        best: best_path,
        last: last_path,
        epochs_run: cfg.epochs - start,
        steps: state.steps,
        best_validation: state.best_validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_halves_after_patience() {
        let mut p = Plateau::new(1.0, 0.5, 10);
        assert!(p.observe(1.0));
        for _ in 0..9 {
            p.observe(2.0);
            assert_eq!(p.lr, 1.0);
        }
        p.observe(2.0);
        assert_eq!(p.lr, 0.5);
        assert!(p.observe(0.5));
        assert_eq!(p.lr, 0.5);
    }

    #[test]
    fn validation_split_is_seeded_and_disjoint() {
        let ids: Vec<String> = (0..20).map(|i| format!("c{i:02}")).collect();
        let (a, b) = validation_split(&ids, 0.1, 4);
        assert_eq!((a.len(), b.len()), (18, 2));
        assert!(b.iter().all(|v| !a.contains(v)));
        assert_eq!(validation_split(&ids, 0.1, 4), (a, b));
        let (one, none) = validation_split(&ids[..1], 0.5, 0);
        assert_eq!((one.len(), none.len()), (1, 0));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            plateau_factor: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
