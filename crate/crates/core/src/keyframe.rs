//! Frame importance from spatial self-attention and a joint softmax over
//! (class, frame) scores; key-frame selection and attention heatmaps.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{gaussian_blur, Plane, CROP_SIZE};
use crate::nn::{
    matmul, matmul_nt, matmul_tn, relu_backward_inplace, relu_inplace, Adam, AdamConfig, Conv2d,
    Linear, ParamSet, Tensor4,
};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 7;
pub const DEFAULT_K: usize = 10;
/// Total downsampling of the local-feature backbone.
pub const GRID_STRIDE: usize = 16;
/// Radius on the [-10, 10] label plane below which a label counts as neutral.
pub const NEUTRAL_RADIUS: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    /// Output channels of the four stride-2 conv stages; the last is D.
    pub channels: [usize; 4],
    pub heads: usize,
    pub attention_hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub k: usize,
    /// Per-frame photometric jitter and random mirroring during training.
    pub augment: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            heads: 4,
            attention_hidden: 64,
            steps: 1500,
            learning_rate: 1e-3,
            k: DEFAULT_K,
            augment: true,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0)
            || self.heads == 0
            || self.attention_hidden == 0
            || self.k == 0
        {
            return Err(Error::Config("selector sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "selector learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.channels[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    /// Row-major `L x D`.
    pub descriptors: Vec<f64>,
    pub dim: usize,
    pub grid_shape: (usize, usize),
}

impl FeatureGrid {
    pub fn len(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.descriptors[l * self.dim..(l + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub heads: usize,
    pub locations: usize,
    pub grid_shape: (usize, usize),
    /// Row-major `heads x locations`.
    pub weights: Vec<f64>,
}

impl AttentionWeights {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.locations..(r + 1) * self.locations]
    }

    pub fn uniform(heads: usize, grid_shape: (usize, usize)) -> Self {
        let l = grid_shape.0 * grid_shape.1;
        Self {
            heads,
            locations: l,
            grid_shape,
            weights: vec![1.0 / l as f64; heads * l],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameImportance {
    pub classes: usize,
    pub frames: usize,
    /// Row-major `classes x frames`, summing to 1.
    pub joint: Vec<f64>,
    pub marginal: Vec<f64>,
    /// Chronological; duplicates appear only when the clip is shorter than K.
    pub selected: Vec<usize>,
}

/// Four-stage strided conv encoder producing a `D x H/16 x W/16` map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub convs: Vec<Conv2d<f32>>,
}

impl ParamSet<f32> for Backbone {
    fn tensors(&self) -> Vec<&[f32]> {
        self.convs.iter().flat_map(|c| c.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.convs
            .iter_mut()
            .flat_map(|c| c.tensors_mut())
            .collect()
    }
}

/// Attention MLP `D -> hidden -> heads` plus the bias-free classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub hidden: Linear<f64>,
    /// `heads x hidden`.
    pub score: Vec<f64>,
    /// `classes x (heads * D)`.
    pub classifier: Vec<f64>,
}

impl ParamSet<f64> for AttentionHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.hidden.tensors();
        t.push(&self.score);
        t.push(&self.classifier);
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.hidden.tensors_mut();
        t.push(&mut self.score);
        t.push(&mut self.classifier);
        t
    }
}

impl AttentionHead {
    fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            score: vec![0.0; self.score.len()],
            classifier: vec![0.0; self.classifier.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorParams {
    pub config: SelectorConfig,
    pub backbone: Backbone,
    pub head: AttentionHead,
}

impl SelectorParams {
    pub fn init(config: &SelectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let convs = config
            .channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(c_in, c, 2, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        let d = config.descriptor_dim();
        let hidden = Linear::new(d, config.attention_hidden, &mut rng);
        let score = crate::nn::glorot_uniform(
            config.heads * config.attention_hidden,
            config.attention_hidden,
            config.heads,
            &mut rng,
        );
        let width = config.heads * d;
        let classifier =
            crate::nn::glorot_uniform(NUM_CLASSES * width, width, NUM_CLASSES, &mut rng);
        Ok(Self {
            config: config.clone(),
            backbone: Backbone { convs },
            head: AttentionHead {
                hidden,
                score,
                classifier,
            },
        })
    }

    fn heads(&self) -> usize {
        self.config.heads
    }

    fn dim(&self) -> usize {
        self.config.descriptor_dim()
    }
}

/// Neutral inside [`NEUTRAL_RADIUS`], otherwise one of six equal angular
/// sectors counted from the positive-valence axis.
pub fn class_of(valence: i32, arousal: i32) -> usize {
    let (v, a) = (valence as f64, arousal as f64);
    if (v * v + a * a).sqrt() < NEUTRAL_RADIUS {
        return 0;
    }
    let tau = std::f64::consts::TAU;
    let angle = a.atan2(v).rem_euclid(tau);
    1 + ((angle / tau * 6.0).floor() as usize).min(5)
}

fn check_frames(frames: &Tensor4<f32>) -> Result<()> {
    let s = CROP_SIZE as usize;
    if frames.c != 3 || frames.h != s || frames.w != s {
        return Err(Error::shape(
            format!("F x 3 x {s} x {s}"),
            format!("{:?}", frames.shape()),
        ));
    }
    if frames.n == 0 {
        return Err(Error::Invalid("clip has no frames".into()));
    }
    Ok(())
}

struct BackboneCache {
    /// Input followed by the post-ReLU output of every stage.
    activations: Vec<Tensor4<f32>>,
}

fn backbone_forward(b: &Backbone, x: &Tensor4<f32>) -> BackboneCache {
    let mut centered = x.clone();
    centered.data.iter_mut().for_each(|v| *v -= 0.5);
    let mut activations = vec![centered];
    for conv in &b.convs {
        let mut y = conv.forward(activations.last().unwrap());
        relu_inplace(&mut y.data);
        activations.push(y);
    }
    BackboneCache { activations }
}

fn backbone_backward(b: &Backbone, cache: &BackboneCache, dy: Tensor4<f32>, grad: &mut Backbone) {
    let mut dy = dy;
    for i in (0..b.convs.len()).rev() {
        relu_backward_inplace(&cache.activations[i + 1].data, &mut dy.data);
        match b.convs[i].backward(&cache.activations[i], &dy, &mut grad.convs[i], i > 0) {
            Some(dx) => dy = dx,
            None => break,
        }
    }
}

/// `D x L` channel-major map of one frame to a row-major `L x D` grid.
fn to_grid(map: &[f32], d: usize, gh: usize, gw: usize) -> FeatureGrid {
    let l = gh * gw;
    let mut descriptors = vec![0.0; l * d];
    for c in 0..d {
        for p in 0..l {
            descriptors[p * d + c] = map[c * l + p] as f64;
        }
    }
    FeatureGrid {
        descriptors,
        dim: d,
        grid_shape: (gh, gw),
    }
}

/// Local descriptors for every frame of a `F x 3 x 96 x 96` tensor in [0, 1].
pub fn extract_features(
    params: &SelectorParams,
    frames: &Tensor4<f32>,
) -> Result<Vec<FeatureGrid>> {
    check_frames(frames)?;
    let cache = backbone_forward(&params.backbone, frames);
    let out = cache.activations.last().unwrap();
    if !out.is_finite() {
        return Err(Error::NonFinite("selector backbone"));
    }
    Ok((0..out.n)
        .map(|i| to_grid(out.sample(i), out.c, out.h, out.w))
        .collect())
}

/// Single-frame form of [`extract_features`]; `frame` is CHW.
pub fn extract_local_features(
    params: &SelectorParams,
    frame: &[f32],
    height: usize,
    width: usize,
) -> Result<FeatureGrid> {
    if frame.len() != 3 * height * width {
        return Err(Error::shape(
            format!("3 x {height} x {width} buffer"),
            format!("{} values", frame.len()),
        ));
    }
    let x = Tensor4::from_vec(1, 3, height, width, frame.to_vec());
    Ok(extract_features(params, &x)?.remove(0))
}

struct HeadCache {
    hidden: Vec<f64>,
    attention: Vec<f64>,
}

fn head_forward(head: &AttentionHead, heads: usize, grid: &FeatureGrid) -> (HeadCache, Vec<f64>) {
    let (l, d) = (grid.len(), grid.dim);
    let da = head.hidden.outputs;
    let mut hidden = head.hidden.forward(&grid.descriptors, l);
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let mut scores = vec![0.0; l * heads];
    matmul_nt(l, da, heads, &hidden, &head.score, 0.0, &mut scores);
    let mut attention = vec![0.0; heads * l];
    for r in 0..heads {
        let max = (0..l)
            .map(|p| scores[p * heads + r])
            .fold(f64::NEG_INFINITY, f64::max);
        let row = &mut attention[r * l..(r + 1) * l];
        for (p, a) in row.iter_mut().enumerate() {
            *a = (scores[p * heads + r] - max).exp();
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|a| *a /= z);
    }
    let mut aggregated = vec![0.0; heads * d];
    matmul(
        heads,
        l,
        d,
        &attention,
        &grid.descriptors,
        0.0,
        &mut aggregated,
    );
    (HeadCache { hidden, attention }, aggregated)
}

/// Returns `dL/d descriptors` and accumulates head gradients.
fn head_backward(
    head: &AttentionHead,
    heads: usize,
    grid: &FeatureGrid,
    cache: &HeadCache,
    d_agg: &[f64],
    grad: &mut AttentionHead,
) -> Vec<f64> {
    let (l, d) = (grid.len(), grid.dim);
    let da = head.hidden.outputs;
    let r = &grid.descriptors;
    let a = &cache.attention;
    let mut d_att = vec![0.0; heads * l];
    matmul_nt(heads, d, l, d_agg, r, 0.0, &mut d_att);
    let mut d_r = vec![0.0; l * d];
    matmul_tn(l, heads, d, a, d_agg, 0.0, &mut d_r);
    let mut d_scores = vec![0.0; l * heads];
    for h in 0..heads {
        let row = &a[h * l..(h + 1) * l];
        let drow = &d_att[h * l..(h + 1) * l];
        let dot: f64 = row.iter().zip(drow).map(|(x, y)| x * y).sum();
        for p in 0..l {
            d_scores[p * heads + h] = row[p] * (drow[p] - dot);
        }
    }
    matmul_tn(heads, l, da, &d_scores, &cache.hidden, 1.0, &mut grad.score);
    let mut d_hidden = vec![0.0; l * da];
    matmul(l, heads, da, &d_scores, &head.score, 0.0, &mut d_hidden);
    for (g, h) in d_hidden.iter_mut().zip(&cache.hidden) {
        *g *= 1.0 - h * h;
    }
    let dx = head.hidden.backward(r, &d_hidden, l, &mut grad.hidden);
    d_r.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
    d_r
}

/// Per-head softmax over locations and the attention-weighted sums
/// (`heads x D`, row-major).
pub fn spatial_attention(
    grid: &FeatureGrid,
    params: &SelectorParams,
) -> Result<(AttentionWeights, Vec<f64>)> {
    if grid.dim != params.dim() || grid.descriptors.len() != grid.len() * grid.dim {
        return Err(Error::shape(
            format!("L x {}", params.dim()),
            format!("L x {}", grid.dim),
        ));
    }
    let (cache, aggregated) = head_forward(&params.head, params.heads(), grid);
    if !aggregated.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("spatial attention"));
    }
    Ok((
        AttentionWeights {
            heads: params.heads(),
            locations: grid.len(),
            grid_shape: grid.grid_shape,
            weights: cache.attention,
        },
        aggregated,
    ))
}

/// Weighted sum of descriptor rows, one row per head.
pub fn aggregate(weights: &AttentionWeights, grid: &FeatureGrid) -> Vec<f64> {
    let mut out = vec![0.0; weights.heads * grid.dim];
    matmul(
        weights.heads,
        weights.locations,
        grid.dim,
        &weights.weights,
        &grid.descriptors,
        0.0,
        &mut out,
    );
    out
}

/// Softmax over all `classes x frames` entries of a row-major score matrix,
/// returning the joint and its per-frame marginal.
pub fn joint_softmax(scores: &[f64], classes: usize, frames: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(
        scores.len(),
        classes * frames,
        "score matrix must be classes x frames"
    );
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut joint: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = joint.iter().sum();
    joint.iter_mut().for_each(|p| *p /= z);
    let mut marginal = vec![0.0; frames];
    for c in 0..classes {
        for f in 0..frames {
            marginal[f] += joint[c * frames + f];
        }
    }
    (joint, marginal)
}

/// Top-`k` frames by marginal (ties to the earlier frame), cyclically padded
/// from the ranking when there are fewer than `k` frames, then sorted.
pub fn select_top_k(marginal: &[f64], k: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..marginal.len()).collect();
    ranked.sort_by(|&a, &b| marginal[b].total_cmp(&marginal[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = (0..k).map(|i| ranked[i % ranked.len()]).collect();
    selected.sort_unstable();
    selected
}

impl FrameImportance {
    pub fn from_scores(scores: &[f64], classes: usize, frames: usize, k: usize) -> Self {
        let (joint, marginal) = joint_softmax(scores, classes, frames);
        let selected = select_top_k(&marginal, k);
        Self {
            classes,
            frames,
            joint,
            marginal,
            selected,
        }
    }
}

fn class_scores(head: &AttentionHead, aggregated: &[f64], frames: usize) -> Vec<f64> {
    let width = aggregated.len() / frames;
    let mut per_frame = vec![0.0; frames * NUM_CLASSES];
    matmul_nt(
        frames,
        width,
        NUM_CLASSES,
        aggregated,
        &head.classifier,
        0.0,
        &mut per_frame,
    );
    transpose(&per_frame, frames, NUM_CLASSES)
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// `per_frame_agg` is row-major `F x (heads * D)`.
pub fn temporal_softmax_pooling(
    per_frame_agg: &[f64],
    frames: usize,
    params: &SelectorParams,
) -> Result<FrameImportance> {
    let width = params.heads() * params.dim();
    if frames == 0 || per_frame_agg.len() != frames * width {
        return Err(Error::shape(
            format!("F x {width}"),
            format!("{} values", per_frame_agg.len()),
        ));
    }
    let scores = class_scores(&params.head, per_frame_agg, frames);
    Ok(FrameImportance::from_scores(
        &scores,
        NUM_CLASSES,
        frames,
        params.config.k,
    ))
}

/// Scores a clip and keeps its attention maps.
pub fn analyse_clip(
    params: &SelectorParams,
    frames: &Tensor4<f32>,
    k: usize,
) -> Result<(FrameImportance, Vec<AttentionWeights>)> {
    let grids = extract_features(params, frames)?;
    let mut agg = Vec::with_capacity(grids.len() * params.heads() * params.dim());
    let mut maps = Vec::with_capacity(grids.len());
    for g in &grids {
        let (w, a) = spatial_attention(g, params)?;
        agg.extend(a);
        maps.push(w);
    }
    let scores = class_scores(&params.head, &agg, grids.len());
    Ok((
        FrameImportance::from_scores(&scores, NUM_CLASSES, grids.len(), k),
        maps,
    ))
}

pub fn select_keyframes(
    params: &SelectorParams,
    frames: &Tensor4<f32>,
    k: usize,
) -> Result<FrameImportance> {
    analyse_clip(params, frames, k).map(|(imp, _)| imp)
}

/// A clip prepared for selector training: face crops and per-frame classes.
#[derive(Debug, Clone)]
pub struct SelectorClip {
    pub clip_id: String,
    pub frames: Tensor4<f32>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainedSelector {
    pub params: SelectorParams,
    pub loss_trace: Vec<f64>,
    /// Clip used at each step, for train/test audits.
    pub batch_ids: Vec<String>,
}

/// `-log sum_f p(c*_f, f)` for one clip, with gradients accumulated into
/// `grad_backbone` and `grad_head`.
pub fn clip_loss_and_grad(
    params: &SelectorParams,
    clip: &SelectorClip,
    grad_backbone: &mut Backbone,
    grad_head: &mut AttentionHead,
) -> Result<f64> {
    check_frames(&clip.frames)?;
    let f = clip.frames.n;
    if clip.classes.len() != f || clip.classes.iter().any(|&c| c >= NUM_CLASSES) {
        return Err(Error::Invalid(format!(
            "clip {}: bad class targets",
            clip.clip_id
        )));
    }
    let heads = params.heads();
    let cache = backbone_forward(&params.backbone, &clip.frames);
    let top = cache.activations.last().unwrap();
    let (d, gh, gw) = (top.c, top.h, top.w);
    let grids: Vec<FeatureGrid> = (0..f).map(|i| to_grid(top.sample(i), d, gh, gw)).collect();
    let mut head_caches = Vec::with_capacity(f);
    let mut agg = Vec::with_capacity(f * heads * d);
    for g in &grids {
        let (c, a) = head_forward(&params.head, heads, g);
        head_caches.push(c);
        agg.extend(a);
    }
    let scores = class_scores(&params.head, &agg, f);
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite("selector scores"));
    }
    let (joint, _) = joint_softmax(&scores, NUM_CLASSES, f);
    let target: Vec<f64> = (0..f).map(|i| joint[clip.classes[i] * f + i]).collect();
    let mass: f64 = target.iter().sum();
    let loss = -mass.max(f64::MIN_POSITIVE).ln();

    // dL/dO = p - 1[c = c*_f] * p(c*_f, f) / mass, laid out frames x classes.
    let mut d_scores = vec![0.0; f * NUM_CLASSES];
    for i in 0..f {
        for c in 0..NUM_CLASSES {
            let mut g = joint[c * f + i];
            if c == clip.classes[i] {
                g -= target[i] / mass;
            }
            d_scores[i * NUM_CLASSES + c] = g;
        }
    }
    let width = heads * d;
    matmul_tn(
        NUM_CLASSES,
        f,
        width,
        &d_scores,
        &agg,
        1.0,
        &mut grad_head.classifier,
    );
    let mut d_agg = vec![0.0; f * width];
    matmul(
        f,
        NUM_CLASSES,
        width,
        &d_scores,
        &params.head.classifier,
        0.0,
        &mut d_agg,
    );

    let l = gh * gw;
    let mut d_top = Tensor4::zeros(f, d, gh, gw);
    for i in 0..f {
        let d_r = head_backward(
            &params.head,
            heads,
            &grids[i],
            &head_caches[i],
            &d_agg[i * width..(i + 1) * width],
            grad_head,
        );
        let dst = d_top.sample_mut(i);
        for p in 0..l {
            for c in 0..d {
                dst[c * l + p] = d_r[p * d + c] as f32;
            }
        }
    }
    backbone_backward(&params.backbone, &cache, d_top, grad_backbone);
    Ok(loss)
}

/// Random gain, per-channel offset and horizontal mirror for every frame.
fn augment_frames<R: rand::Rng>(frames: &Tensor4<f32>, rng: &mut R) -> Tensor4<f32> {
    let mut out = frames.clone();
    let (h, w) = (frames.h, frames.w);
    for i in 0..frames.n {
        let gain: f32 = rng.gen_range(0.7..1.3);
        let offsets: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
        let mirror = rng.gen_bool(0.5);
        let src = frames.sample(i);
        let dst = out.sample_mut(i);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let sx = if mirror { w - 1 - x } else { x };
                    let v = src[(c * h + y) * w + sx] * gain + offsets[c];
                    dst[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// One clip per step, visiting clips in a fresh seeded order each pass.
pub fn train_selector(
    clips: &[SelectorClip],
    config: &SelectorConfig,
    seed: u64,
) -> Result<TrainedSelector> {
    if clips.is_empty() {
        return Err(Error::Invalid("selector training set is empty".into()));
    }
    let mut params = SelectorParams::init(config, seed)?;
    let mut opt_b = Adam::new(&params.backbone, AdamConfig::default());
    let mut opt_h = Adam::new(&params.head, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_1ec7);
    let mut order: Vec<usize> = Vec::new();
    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut batch_ids = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if order.is_empty() {
            order = (0..clips.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let clip = &clips[order.pop().unwrap()];
        let augmented;
        let clip = if config.augment {
            augmented = SelectorClip {
                frames: augment_frames(&clip.frames, &mut rng),
                ..clip.clone()
            };
            &augmented
        } else {
            clip
        };
        let mut gb = Backbone {
            convs: params
                .backbone
                .convs
                .iter()
                .map(|c| c.zeros_like())
                .collect(),
        };
        let mut gh = params.head.zeros_like();
        let loss = clip_loss_and_grad(&params, clip, &mut gb, &mut gh)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("selector loss"));
        }
        opt_b.step(&mut params.backbone, &gb, config.learning_rate);
        opt_h.step(&mut params.head, &gh, config.learning_rate);
        log::debug!("selector step {step}: {} loss {loss:.5}", clip.clip_id);
        loss_trace.push(loss);
        batch_ids.push(clip.clip_id.clone());
    }
    Ok(TrainedSelector {
        params,
        loss_trace,
        batch_ids,
    })
}

/// Max-over-heads attention, bilinearly upsampled to `width x height`,
/// blurred (sigma 4 px) and normalized to [0, 1].
pub fn heat_layer(weights: &AttentionWeights, width: u32, height: u32) -> Plane {
    let (gh, gw) = weights.grid_shape;
    let grid = Plane::from_fn(gw, gh, |x, y| {
        (0..weights.heads)
            .map(|r| weights.row(r)[y * gw + x])
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let (w, h) = (width as usize, height as usize);
    let up = Plane::from_fn(w, h, |x, y| {
        grid.sample(
            (x as f64 + 0.5) * gw as f64 / w as f64 - 0.5,
            (y as f64 + 0.5) * gh as f64 / h as f64 - 0.5,
        )
    });
    let mut heat = gaussian_blur(&up, 4.0);
    let (lo, hi) = (heat.min(), heat.max());
    let span = hi - lo;
    heat.data
        .iter_mut()
        .for_each(|v| *v = if span > 1e-12 { (*v - lo) / span } else { 0.0 });
    heat
}

fn heat_color(t: f64) -> [f64; 3] {
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

pub fn render_heatmap(frame: &RgbImage, weights: &AttentionWeights) -> RgbImage {
    const ALPHA: f64 = 0.45;
    let heat = heat_layer(weights, frame.width(), frame.height());
    let mut out = frame.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let c = heat_color(heat.at(x as usize, y as usize));
        *px = Rgb(std::array::from_fn(|i| {
            ((1.0 - ALPHA) * px[i] as f64 + ALPHA * c[i])
                .round()
                .clamp(0.0, 255.0) as u8
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> SelectorConfig {
        SelectorConfig {
            channels: [4, 4, 8, 8],
            heads: 2,
            attention_hidden: 6,
            steps: 10,
            learning_rate: 1e-3,
            k: 10,
            augment: true,
        }
    }

    fn random_frames(n: usize, seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * 96 * 96).map(|_| rng.gen::<f32>()).collect();
        Tensor4::from_vec(n, 3, 96, 96, data)
    }

    #[test]
    fn class_rule_examples() {
        assert_eq!(class_of(0, 0), 0);
        assert_eq!(class_of(10, 0), 1);
        assert_eq!(class_of(-10, 0), 4);
        assert_eq!(class_of(2, 1), 0);
        assert_eq!(class_of(0, 10), 2);
        assert_eq!(class_of(1, -10), 5);
        assert_eq!(class_of(9, -2), 6);
        let mut seen = [false; NUM_CLASSES];
        for v in -10..=10 {
            for a in -10..=10 {
                seen[class_of(v, a)] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn grid_shape_and_shape_errors() {
        let p = SelectorParams::init(&tiny_config(), 1).unwrap();
        let frames = random_frames(2, 0);
        let g = extract_local_features(&p, frames.sample(0), 96, 96).unwrap();
        assert_eq!(g.grid_shape, (6, 6));
        assert_eq!(g.len(), 36);
        let twin = extract_local_features(&p, frames.sample(0), 96, 96).unwrap();
        assert_eq!(g, twin);
        assert!(extract_local_features(&p, &vec![0.0; 3 * 80 * 80], 80, 80).is_err());
    }

    #[test]
    fn padding_and_ordering() {
        let marginal: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(select_top_k(&marginal, 10), (0..10).collect::<Vec<_>>());
        let m8 = [0.1, 0.3, 0.05, 0.2, 0.1, 0.1, 0.1, 0.05];
        let s = select_top_k(&m8, 10);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(s, vec![0, 1, 1, 2, 3, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn saturated_frame_dominates() {
        let mut scores = vec![0.0; 7 * 5];
        for c in 0..7 {
            scores[c * 5 + 2] = 1000.0;
        }
        let imp = FrameImportance::from_scores(&scores, 7, 5, 10);
        assert!(imp.marginal[2] > 0.999);
        let flat = FrameImportance::from_scores(&[3.0; 14], 7, 2, 10);
        assert!(flat.marginal.iter().all(|m| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = SelectorParams::init(&tiny_config(), 3).unwrap();
        let g = extract_features(&p, &random_frames(1, 4))
            .unwrap()
            .remove(0);
        let (w, agg) = spatial_attention(&g, &p).unwrap();
        for r in 0..w.heads {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(agg, aggregate(&w, &g));
    }

    #[test]
    fn selector_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut p = SelectorParams::init(&cfg, 9).unwrap();
        let frames = random_frames(3, 10);
        let clip = SelectorClip {
            clip_id: "c".into(),
            frames,
            classes: vec![1, 3, 1],
        };
        let mut gb = Backbone {
            convs: p.backbone.convs.iter().map(|c| c.zeros_like()).collect(),
        };
        let mut gh = p.head.zeros_like();
        clip_loss_and_grad(&p, &clip, &mut gb, &mut gh).unwrap();
        let loss = |p: &SelectorParams| {
            let mut gb = Backbone {
                convs: p.backbone.convs.iter().map(|c| c.zeros_like()).collect(),
            };
            let mut gh = p.head.zeros_like();
            clip_loss_and_grad(p, &clip, &mut gb, &mut gh).unwrap()
        };
        // Head parameters are f64 end to end; check them tightly.
        let analytic: Vec<f64> = gh
            .tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..15 {
            let idx = rng.gen_range(0..analytic.len());
            let h = 1e-5;
            let bump = |p: &mut SelectorParams, delta: f64| {
                let mut k = idx;
                for t in p.head.tensors_mut() {
                    if k < t.len() {
                        t[k] += delta;
                        return;
                    }
                    k -= t.len();
                }
            };
            bump(&mut p, h);
            let up = loss(&p);
            bump(&mut p, -2.0 * h);
            let down = loss(&p);
            bump(&mut p, h);
            let fd = (up - down) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (fd - a).abs() <= 2e-3 * a.abs().max(fd.abs()) + 1e-5,
                "param {idx}: fd {fd} vs {a}"
            );
        }
    }

    #[test]
    fn training_is_seeded() {
        let clip = SelectorClip {
            clip_id: "c".into(),
            frames: random_frames(4, 1),
            classes: vec![2; 4],
        };
        let a = train_selector(std::slice::from_ref(&clip), &tiny_config(), 5).unwrap();
        let b = train_selector(std::slice::from_ref(&clip), &tiny_config(), 5).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert!(a.loss_trace.iter().all(|&l| l >= 0.0));
        assert!(train_selector(&[], &tiny_config(), 5).is_err());
    }

    #[test]
    fn heat_layer_geometry() {
        let uniform = AttentionWeights::uniform(2, (6, 6));
        let h = heat_layer(&uniform, 96, 96);
        assert!(h.data.iter().all(|&v| v == h.data[0]));
        let mut one_hot = AttentionWeights::uniform(1, (6, 6));
        one_hot.weights.iter_mut().for_each(|w| *w = 0.0);
        one_hot.weights[0] = 1.0;
        let h = heat_layer(&one_hot, 96, 96);
        let argmax = (0..h.data.len())
            .max_by(|&a, &b| h.data[a].total_cmp(&h.data[b]))
            .unwrap();
        assert!(argmax % 96 < 16 && argmax / 96 < 16);
    }
}
