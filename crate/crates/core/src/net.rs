//! Three-stream affect regressor: face RGB, eye flow and mouth flow encoders,
//! mean fusion of the last block, temporal Gaussian filter summary and a
//! per-frame sigmoid regression head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::denormalize_label;
use crate::metrics::{ccc_loss_with_grad, labels_degenerate};
use crate::nn::{
    dropout_mask, max_pool2x2, max_pool2x2_backward, relu_backward_inplace, relu_inplace, sigmoid,
    BatchNorm2d, BnCache, Conv2d, Linear, ParamSet, PoolCache, Real, Tensor4,
};
use crate::temporal::{
    apply_filter_bank, build_sampling_matrix, filter_gradients, FilterBankParams, FilterGrad,
};
use crate::{Error, Result};

pub const STREAMS: usize = 3;
pub const BLOCKS: usize = 5;
pub const INPUT_SIZE: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub channels: [usize; BLOCKS],
    pub dropout: f64,
    /// Filters in the temporal bank.
    pub filters: usize,
    /// Gaussians per filter.
    pub gaussians: usize,
    pub fc: [usize; 2],
    /// Key frames per clip.
    pub frames: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128, 256],
            dropout: 0.3,
            filters: 3,
            gaussians: 4,
            fc: [256, 128],
            frames: 10,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("block channels must be positive".into()));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "channel progression {:?} must be nondecreasing",
                self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.filters == 0
            || self.gaussians == 0
            || self.fc.contains(&0)
            || self.frames == 0
        {
            return Err(Error::Config(
                "filter bank, FC widths and frame count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[BLOCKS - 1]
    }

    /// Width of the per-frame head input: own feature plus the bank summary.
    pub fn head_inputs(&self) -> usize {
        self.feature_dim() * (1 + self.filters * self.gaussians)
    }

    /// Spatial size after the five blocks.
    pub fn top_size(&self) -> usize {
        INPUT_SIZE >> BLOCKS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Block<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AffectNet<T> {
    pub config: NetConfig,
    /// Face RGB, eye flow, mouth flow.
    pub streams: Vec<Vec<Block<T>>>,
    pub filters: FilterBankParams,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Real> ParamSet<T> for AffectNet<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut t = Vec::new();
        for b in self.streams.iter().flatten() {
            t.extend(b.conv.tensors());
            t.extend(b.bn.tensors());
        }
        for l in [&self.fc1, &self.fc2, &self.out] {
            t.extend(l.tensors());
        }
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t = Vec::new();
        for b in self.streams.iter_mut().flatten() {
            t.extend(b.conv.tensors_mut());
            t.extend(b.bn.tensors_mut());
        }
        for l in [&mut self.fc1, &mut self.fc2, &mut self.out] {
            t.extend(l.tensors_mut());
        }
        t
    }
}

/// Filter-bank parameters as a flat `[g_hat, d_hat, s_hat]*` buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVec(pub Vec<f64>);

impl FilterVec {
    pub fn of(bank: &FilterBankParams) -> Self {
        Self(
            bank.filters
                .iter()
                .flat_map(|f| [f.g_hat, f.d_hat, f.s_hat])
                .collect(),
        )
    }

    pub fn of_grads(grads: &[FilterGrad]) -> Self {
        Self(
            grads
                .iter()
                .flat_map(|g| [g.g_hat, g.d_hat, g.s_hat])
                .collect(),
        )
    }

    pub fn write_to(&self, bank: &mut FilterBankParams) {
        for (f, v) in bank.filters.iter_mut().zip(self.0.chunks_exact(3)) {
            f.g_hat = v[0];
            f.d_hat = v[1];
            f.s_hat = v[2];
        }
    }
}

impl ParamSet<f64> for FilterVec {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.0]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.0]
    }
}

/// Per-frame inputs of a batch of clips, `clips * frames` samples each.
#[derive(Debug, Clone)]
pub struct ClipBatch<T> {
    pub clips: usize,
    pub rgb: Tensor4<T>,
    pub eye_flow: Tensor4<T>,
    pub mouth_flow: Tensor4<T>,
}

impl<T: Real> ClipBatch<T> {
    fn streams(&self) -> [&Tensor4<T>; STREAMS] {
        [&self.rgb, &self.eye_flow, &self.mouth_flow]
    }

    fn check(&self, config: &NetConfig) -> Result<()> {
        let n = self.clips * config.frames;
        for s in self.streams() {
            if s.shape() != [n, 3, INPUT_SIZE, INPUT_SIZE] {
                return Err(Error::shape(
                    format!("[{n}, 3, {INPUT_SIZE}, {INPUT_SIZE}]"),
                    format!("{:?}", s.shape()),
                ));
            }
        }
        if self.clips == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        Ok(())
    }
}

/// Per-key-frame output for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffectPrediction {
    pub clip_id: String,
    pub frames: Vec<usize>,
    /// `(valence, arousal)` in (0, 1).
    pub normalized: Vec<[f64; 2]>,
    /// The same on the [-10, 10] scale.
    pub levels: Vec<[f64; 2]>,
}

impl AffectPrediction {
    pub fn new(clip_id: &str, frames: Vec<usize>, normalized: Vec<[f64; 2]>) -> Self {
        let levels = normalized
            .iter()
            .map(|p| [denormalize_label(p[0]), denormalize_label(p[1])])
            .collect();
        Self {
            clip_id: clip_id.to_string(),
            frames,
            normalized,
            levels,
        }
    }
}

struct BlockCache<T> {
    input: Tensor4<T>,
    bn: BnCache<T>,
    pool: PoolCache,
}

/// Saved state of a training forward pass.
pub struct ForwardCache<T> {
    blocks: Vec<Vec<BlockCache<T>>>,
    top_shape: [usize; 4],
    /// `rows x D`, f64 for the filter bank.
    features: Vec<f64>,
    head_in: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    mask1: Vec<T>,
    mask2: Vec<T>,
    pred: Vec<[f64; 2]>,
}

/// Gradients with the same layout as the model.
pub struct Gradients<T> {
    pub net: AffectNet<T>,
    pub filters: Vec<FilterGrad>,
}

impl<T: Real> AffectNet<T> {
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let streams = (0..STREAMS)
            .map(|_| {
                let mut c_in = 3;
                config
                    .channels
                    .iter()
                    .map(|&c| {
                        let conv = Conv2d::new(c_in, c, 1, &mut rng);
                        c_in = c;
                        Block {
                            conv,
                            bn: BatchNorm2d::new(c),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut filters = FilterBankParams::new(config.filters, config.gaussians, config.frames);
        // Distinct starting widths so filters do not receive identical updates.
        let mid = (config.filters as f64 - 1.0) / 2.0;
        for (j, f) in filters.filters.iter_mut().enumerate() {
            f.s_hat = (j as f64 - mid) * std::f64::consts::LN_2;
        }
        let fc1 = Linear::new(config.head_inputs(), config.fc[0], &mut rng);
        let fc2 = Linear::new(config.fc[0], config.fc[1], &mut rng);
        let out = Linear::new(config.fc[1], 2, &mut rng);
        Ok(Self {
            config: config.clone(),
            streams,
            filters,
            fc1,
            fc2,
            out,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            streams: self
                .streams
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|b| Block {
                            conv: b.conv.zeros_like(),
                            bn: b.bn.zeros_like(),
                        })
                        .collect()
                })
                .collect(),
            filters: self.filters.clone(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    fn stream_forward(
        &self,
        s: usize,
        x: &Tensor4<T>,
        mode: Mode,
        caches: Option<&mut Vec<BlockCache<T>>>,
    ) -> Tensor4<T> {
        let mut x = x.clone();
        let mut caches = caches;
        for block in &self.streams[s] {
            let z = block.conv.forward(&x);
            let (mut y, bn_cache) = match mode {
                Mode::Train => {
                    let (y, c) = block.bn.forward_train(&z);
                    (y, Some(c))
                }
                Mode::Eval => (block.bn.forward_eval(&z), None),
            };
            drop(z);
            relu_inplace(&mut y.data);
            let (p, pool) = max_pool2x2(&y);
            if let (Some(c), Some(bn)) = (caches.as_deref_mut(), bn_cache) {
                c.push(BlockCache { input: x, bn, pool });
            }
            x = p;
        }
        x
    }

    /// Fused, globally pooled per-frame features (`rows x D`).
    fn encode(
        &self,
        batch: &ClipBatch<T>,
        mode: Mode,
        mut caches: Option<&mut Vec<Vec<BlockCache<T>>>>,
    ) -> (Vec<f64>, [usize; 4]) {
        let mut fused: Option<Tensor4<T>> = None;
        for (s, input) in batch.streams().into_iter().enumerate() {
            let mut stream_cache = Vec::new();
            let top = self.stream_forward(
                s,
                input,
                mode,
                caches.is_some().then_some(&mut stream_cache),
            );
            if let Some(c) = caches.as_deref_mut() {
                c.push(stream_cache);
            }
            match fused.as_mut() {
                None => fused = Some(top),
                Some(f) => f.data.iter_mut().zip(&top.data).for_each(|(a, b)| *a += *b),
            }
        }
        let fused = fused.unwrap();
        let hw = fused.h * fused.w;
        let scale = 1.0 / (STREAMS * hw) as f64;
        let features = fused
            .data
            .chunks_exact(hw)
            .map(|plane| plane.iter().map(|v| v.f64()).sum::<f64>() * scale)
            .collect();
        (features, fused.shape())
    }

    fn head_input(&self, features: &[f64], clips: usize) -> Result<Vec<T>> {
        let (t, d) = (self.config.frames, self.config.feature_dim());
        let width = self.config.head_inputs();
        let mut x = Vec::with_capacity(clips * t * width);
        for b in 0..clips {
            let clip = &features[b * t * d..(b + 1) * t * d];
            let summary = apply_filter_bank(clip, t, d, &self.filters)?;
            for f in 0..t {
                x.extend(clip[f * d..(f + 1) * d].iter().map(|&v| T::of(v)));
                x.extend(summary.iter().map(|&v| T::of(v)));
            }
        }
        Ok(x)
    }

    fn forward_impl<R: Rng>(
        &self,
        batch: &ClipBatch<T>,
        mode: Mode,
        rng: &mut R,
        keep_cache: bool,
    ) -> Result<(Vec<[f64; 2]>, Option<ForwardCache<T>>)> {
        batch.check(&self.config)?;
        let rows = batch.clips * self.config.frames;
        let mut blocks = Vec::new();
        let (features, top_shape) = self.encode(batch, mode, keep_cache.then_some(&mut blocks));
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("stream features"));
        }
        let head_in = self.head_input(&features, batch.clips)?;
        let rate = if mode == Mode::Train {
            self.config.dropout
        } else {
            0.0
        };

        let mut h1 = self.fc1.forward(&head_in, rows);
        relu_inplace(&mut h1);
        let mask1: Vec<T> = dropout_mask(h1.len(), rate, rng);
        h1.iter_mut().zip(&mask1).for_each(|(h, m)| *h *= *m);
        let mut h2 = self.fc2.forward(&h1, rows);
        relu_inplace(&mut h2);
        let mask2: Vec<T> = dropout_mask(h2.len(), rate, rng);
        h2.iter_mut().zip(&mask2).for_each(|(h, m)| *h *= *m);
        let z = self.out.forward(&h2, rows);
        let pred: Vec<[f64; 2]> = z
            .chunks_exact(2)
            .map(|p| [sigmoid(p[0]).f64(), sigmoid(p[1]).f64()])
            .collect();
        if !pred.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("predictions"));
        }
        let cache = keep_cache.then(|| ForwardCache {
            blocks,
            top_shape,
            features,
            head_in,
            h1,
            h2,
            mask1,
            mask2,
            pred: pred.clone(),
        });
        Ok((pred, cache))
    }

    /// Per-frame `(valence, arousal)` in (0, 1), clip-major.
    pub fn forward<R: Rng>(
        &self,
        batch: &ClipBatch<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<[f64; 2]>> {
        self.forward_impl(batch, mode, rng, false).map(|(p, _)| p)
    }

    pub fn forward_train<R: Rng>(
        &self,
        batch: &ClipBatch<T>,
        rng: &mut R,
    ) -> Result<ForwardCache<T>> {
        self.forward_impl(batch, Mode::Train, rng, true)
            .map(|(_, c)| c.unwrap())
    }

    /// Backpropagates `dL/dpred` through the whole model.
    pub fn backward(&self, cache: &ForwardCache<T>, d_pred: &[[f64; 2]]) -> Gradients<T> {
        let cfg = &self.config;
        let rows = cache.pred.len();
        let (t, d) = (cfg.frames, cfg.feature_dim());
        let clips = rows / t;
        let mut g = self.zeros_like();

        let dz: Vec<T> = cache
            .pred
            .iter()
            .zip(d_pred)
            .flat_map(|(p, dp)| {
                [
                    T::of(dp[0] * p[0] * (1.0 - p[0])),
                    T::of(dp[1] * p[1] * (1.0 - p[1])),
                ]
            })
            .collect();
        let mut dh2 = self.out.backward(&cache.h2, &dz, rows, &mut g.out);
        dh2.iter_mut().zip(&cache.mask2).for_each(|(a, m)| *a *= *m);
        relu_backward_inplace(&cache.h2, &mut dh2);
        let mut dh1 = self.fc2.backward(&cache.h1, &dh2, rows, &mut g.fc2);
        dh1.iter_mut().zip(&cache.mask1).for_each(|(a, m)| *a *= *m);
        relu_backward_inplace(&cache.h1, &mut dh1);
        let d_in = self.fc1.backward(&cache.head_in, &dh1, rows, &mut g.fc1);

        // Split into the direct feature path and the summary path.
        let width = cfg.head_inputs();
        let srows = self.filters.rows();
        let mut d_feat = vec![0.0f64; rows * d];
        let mut filter_grads = vec![FilterGrad::default(); self.filters.filters.len()];
        for b in 0..clips {
            let mut d_summary = vec![0.0f64; srows * d];
            for f in 0..t {
                let r = b * t + f;
                let row = &d_in[r * width..(r + 1) * width];
                for j in 0..d {
                    d_feat[r * d + j] += row[j].f64();
                }
                for (acc, v) in d_summary.iter_mut().zip(&row[d..]) {
                    *acc += v.f64();
                }
            }
            let x = &cache.features[b * t * d..(b + 1) * t * d];
            let mut offset = 0;
            for (fi, fp) in self.filters.filters.iter().enumerate() {
                let m = build_sampling_matrix(fp, t);
                let mut d_w = vec![0.0; fp.n * t];
                for k in 0..fp.n {
                    let ds = &d_summary[(offset + k) * d..(offset + k + 1) * d];
                    let w = m.row(k);
                    for ti in 0..t {
                        let xr = &x[ti * d..(ti + 1) * d];
                        d_w[k * t + ti] = ds.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            d_feat[(b * t + ti) * d + j] += w[ti] * ds[j];
                        }
                    }
                }
                let fg = filter_gradients(fp, t, &d_w);
                filter_grads[fi].g_hat += fg.g_hat;
                filter_grads[fi].d_hat += fg.d_hat;
                filter_grads[fi].s_hat += fg.s_hat;
                offset += fp.n;
            }
        }

        // Global average pool and stream mean.
        let [n, c, h, w] = cache.top_shape;
        let hw = h * w;
        let scale = 1.0 / (STREAMS * hw) as f64;
        let mut d_top = Tensor4::zeros(n, c, h, w);
        for (plane, &gv) in d_top.data.chunks_exact_mut(hw).zip(&d_feat) {
            plane.iter_mut().for_each(|v| *v = T::of(gv * scale));
        }
        for s in 0..STREAMS {
            let mut dy = d_top.clone();
            for (i, block) in self.streams[s].iter().enumerate().rev() {
                let bc = &cache.blocks[s][i];
                let mut dr = max_pool2x2_backward(&bc.pool, &dy);
                // ReLU mask from the normalized activations.
                let plane = dr.h * dr.w;
                let xhat = bc.bn.xhat();
                for (idx, v) in dr.data.iter_mut().enumerate() {
                    let ch = (idx / plane) % dr.c;
                    if block.bn.gamma[ch] * xhat[idx] + block.bn.beta[ch] <= T::zero() {
                        *v = T::zero();
                    }
                }
                let dz = block.bn.backward(&bc.bn, &dr, &mut g.streams[s][i].bn);
                match block
                    .conv
                    .backward(&bc.input, &dz, &mut g.streams[s][i].conv, i > 0)
                {
                    Some(dx) => dy = dx,
                    None => break,
                }
            }
        }
        Gradients {
            net: g,
            filters: filter_grads,
        }
    }

    /// Folds the batch statistics of a training forward into the running
    /// normalization averages.
    pub fn commit_bn_stats(&mut self, cache: &ForwardCache<T>) {
        for (s, stream) in self.streams.iter_mut().enumerate() {
            for (i, block) in stream.iter_mut().enumerate() {
                block.bn.commit_stats(&cache.blocks[s][i].bn);
            }
        }
    }
}

/// Loss and gradients for one batch, or `None` when both label dimensions are
/// constant across the batch.
pub fn loss_and_gradients<T: Real, R: Rng>(
    net: &AffectNet<T>,
    batch: &ClipBatch<T>,
    labels: &[[f64; 2]],
    rng: &mut R,
) -> Result<Option<(f64, Gradients<T>, ForwardCache<T>)>> {
    if labels.len() != batch.clips * net.config.frames {
        return Err(Error::shape(
            format!("{} label rows", batch.clips * net.config.frames),
            format!("{}", labels.len()),
        ));
    }
    if labels_degenerate(labels) {
        log::warn!("skipping batch with constant labels in both dimensions");
        return Ok(None);
    }
    let cache = net.forward_train(batch, rng)?;
    let (loss, d_pred) = ccc_loss_with_grad(&cache.pred, labels)?;
    let grads = net.backward(&cache, &d_pred);
    Ok(Some((loss, grads, cache)))
}

pub type Model = AffectNet<f32>;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            channels: [2, 2, 3, 3, 4],
            dropout: 0.0,
            filters: 2,
            gaussians: 2,
            fc: [5, 4],
            frames: 3,
        }
    }

    fn random_batch<T: Real>(clips: usize, frames: usize, seed: u64) -> ClipBatch<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = clips * frames;
        let mut t = || {
            Tensor4::from_vec(
                n,
                3,
                96,
                96,
                (0..n * 3 * 96 * 96)
                    .map(|_| T::of(rng.gen::<f64>()))
                    .collect(),
            )
        };
        ClipBatch {
            clips,
            rgb: t(),
            eye_flow: t(),
            mouth_flow: t(),
        }
    }

    #[test]
    fn config_validation_and_shapes() {
        let c = NetConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.top_size(), 3);
        let bad = NetConfig {
            dropout: 1.1,
            ..c.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let shrinking = NetConfig {
            channels: [8, 4, 8, 8, 8],
            ..c
        };
        assert!(shrinking.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = AffectNet::<f32>::init(&tiny(), 3).unwrap();
        let b = AffectNet::<f32>::init(&tiny(), 3).unwrap();
        let c = AffectNet::<f32>::init(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_input_gives_half() {
        let net = AffectNet::<f32>::init(&tiny(), 1).unwrap();
        let z = Tensor4::zeros(3, 3, 96, 96);
        let batch = ClipBatch {
            clips: 1,
            rgb: z.clone(),
            eye_flow: z.clone(),
            mouth_flow: z,
        };
        let p = net
            .forward(&batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(p.iter().all(|r| r == &[0.5, 0.5]));
    }

    #[test]
    fn eval_is_repeatable_and_streams_differ() {
        let net = AffectNet::<f32>::init(
            &NetConfig {
                dropout: 0.3,
                ..tiny()
            },
            2,
        )
        .unwrap();
        let batch = random_batch::<f32>(2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = net.forward(&batch, Mode::Eval, &mut rng).unwrap();
        let b = net.forward(&batch, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
        let swapped = ClipBatch {
            clips: 2,
            rgb: batch.mouth_flow.clone(),
            eye_flow: batch.rgb.clone(),
            mouth_flow: batch.eye_flow.clone(),
        };
        assert_ne!(net.forward(&swapped, Mode::Eval, &mut rng).unwrap(), a);
    }

    #[test]
    fn wrong_frame_count_is_rejected() {
        let net = AffectNet::<f32>::init(&tiny(), 1).unwrap();
        let batch = random_batch::<f32>(1, 2, 0);
        assert!(net
            .forward(&batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn degenerate_batch_is_skipped() {
        let net = AffectNet::<f64>::init(&tiny(), 1).unwrap();
        let batch = random_batch::<f64>(1, 3, 0);
        let labels = [[0.5, 0.5]; 3];
        let r =
            loss_and_gradients(&net, &batch, &labels, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn prediction_denormalizes() {
        let p = AffectPrediction::new("c", vec![0, 1], vec![[0.5, 0.25], [1.0, 0.0]]);
        assert_eq!(p.levels, vec![[0.0, -5.0], [10.0, -10.0]]);
    }
}
