//! Concordance correlation coefficient, the CCC loss and mean squared error.
//!
//! Variances and covariances use population (1/n) normalization.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Denominator guard used when CCC serves as a training loss.
pub const LOSS_EPS: f64 = 1e-8;

/// Two equal-length finite series: predictions and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct SeriesPair<'a> {
    x: &'a [f64],
    y: &'a [f64],
}

impl<'a> SeriesPair<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::shape(
                format!("{} points", x.len()),
                format!("{} points", y.len()),
            ));
        }
        if x.len() < 2 {
            return Err(Error::Invalid(format!(
                "series pair needs at least 2 points, got {}",
                x.len()
            )));
        }
        if !x.iter().chain(y).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("series pair"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &'a [f64] {
        self.x
    }

    pub fn y(&self) -> &'a [f64] {
        self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CccMode {
    /// Zero denominator is an error.
    Strict,
    /// Denominator is offset by [`LOSS_EPS`].
    Loss,
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    n: f64,
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    Moments {
        n,
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    }
}

impl Moments {
    fn denominator(&self, eps: f64) -> f64 {
        self.var_x + self.var_y + (self.mean_x - self.mean_y).powi(2) + eps
    }
}

/// `2 s_xy / (s_x^2 + s_y^2 + (mu_x - mu_y)^2 [+ eps])`.
pub fn ccc(pair: SeriesPair<'_>, mode: CccMode) -> Result<f64> {
    let m = moments(pair.x, pair.y);
    match mode {
        CccMode::Strict => {
            let d = m.denominator(0.0);
            if d == 0.0 {
                return Err(Error::DegenerateCcc);
            }
            Ok(2.0 * m.cov / d)
        }
        CccMode::Loss => Ok(2.0 * m.cov / m.denominator(LOSS_EPS)),
    }
}

/// Guarded CCC and its gradient with respect to the prediction series `x`.
pub fn ccc_with_grad(x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let m = moments(x, y);
    let d = m.denominator(LOSS_EPS);
    let rho = 2.0 * m.cov / d;
    let shift = m.mean_x - m.mean_y;
    let grad = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let d_cov = (yi - m.mean_y) / m.n;
            let d_den = 2.0 * (xi - m.mean_x) / m.n + 2.0 * shift / m.n;
            2.0 * d_cov / d - 2.0 * m.cov * d_den / (d * d)
        })
        .collect();
    (rho, grad)
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(pair: SeriesPair<'_>) -> Option<f64> {
    let m = moments(pair.x, pair.y);
    let d = (m.var_x * m.var_y).sqrt();
    (d > 0.0).then(|| m.cov / d)
}

pub fn mse(pair: SeriesPair<'_>) -> f64 {
    pair.x
        .iter()
        .zip(pair.y)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pair.len() as f64
}

/// Rows of (valence, arousal).
pub type VaRows = [[f64; 2]];

fn column(rows: &VaRows, c: usize) -> Vec<f64> {
    rows.iter().map(|r| r[c]).collect()
}

/// `1 - (ccc_arousal + ccc_valence) / 2`, guarded.
pub fn ccc_loss(pred: &VaRows, truth: &VaRows) -> Result<f64> {
    ccc_loss_with_grad(pred, truth).map(|(l, _)| l)
}

/// CCC loss and its gradient with respect to each prediction row.
pub fn ccc_loss_with_grad(pred: &VaRows, truth: &VaRows) -> Result<(f64, Vec<[f64; 2]>)> {
    let mut rho = [0.0; 2];
    let mut grad = vec![[0.0; 2]; pred.len()];
    for c in 0..2 {
        let (x, y) = (column(pred, c), column(truth, c));
        SeriesPair::new(&x, &y)?;
        let (r, g) = ccc_with_grad(&x, &y);
        rho[c] = r;
        for (row, gi) in grad.iter_mut().zip(g) {
            row[c] = -0.5 * gi;
        }
    }
    Ok((1.0 - (rho[0] + rho[1]) / 2.0, grad))
}

/// True when both label dimensions are constant, which makes the loss uninformative.
pub fn labels_degenerate(truth: &VaRows) -> bool {
    (0..2).all(|c| truth.iter().all(|r| r[c] == truth[0][c]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub n_frames: usize,
    /// `None` when the clip's series are degenerate for strict CCC.
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub mse_valence: f64,
    pub mse_arousal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub mse_valence: f64,
    pub mse_arousal: f64,
    pub n_frames: usize,
    /// Strict CCC of a predictor that always outputs the training-label mean.
    pub baseline_ccc_valence: f64,
    pub baseline_ccc_arousal: f64,
    pub per_clip: Vec<ClipMetrics>,
}

/// Per-clip predictions and labels on the normalized [0, 1] scale.
#[derive(Debug, Clone)]
pub struct ClipSeries {
    pub clip_id: String,
    pub pred: Vec<[f64; 2]>,
    pub truth: Vec<[f64; 2]>,
}

/// Headline numbers are computed on the concatenation of all clips' frames.
pub fn evaluate(clips: &[ClipSeries], train_mean: [f64; 2]) -> Result<MetricReport> {
    let pred: Vec<[f64; 2]> = clips.iter().flat_map(|c| c.pred.iter().copied()).collect();
    let truth: Vec<[f64; 2]> = clips.iter().flat_map(|c| c.truth.iter().copied()).collect();
    let mut headline = [0.0; 2];
    let mut errors = [0.0; 2];
    let mut baseline = [0.0; 2];
    for c in 0..2 {
        let (x, y) = (column(&pred, c), column(&truth, c));
        let pair = SeriesPair::new(&x, &y)?;
        headline[c] = ccc(pair, CccMode::Strict)?;
        errors[c] = mse(pair);
        let constant = vec![train_mean[c]; y.len()];
        baseline[c] = ccc(SeriesPair::new(&constant, &y)?, CccMode::Strict)?;
    }
    let per_clip = clips
        .iter()
        .map(|clip| {
            let mut cc = [None; 2];
            let mut e = [0.0; 2];
            for c in 0..2 {
                let (x, y) = (column(&clip.pred, c), column(&clip.truth, c));
                if let Ok(pair) = SeriesPair::new(&x, &y) {
                    cc[c] = ccc(pair, CccMode::Strict).ok();
                    e[c] = mse(pair);
                }
            }
            ClipMetrics {
                clip_id: clip.clip_id.clone(),
                n_frames: clip.pred.len(),
                ccc_valence: cc[0],
                ccc_arousal: cc[1],
                mse_valence: e[0],
                mse_arousal: e[1],
            }
        })
        .collect();
    Ok(MetricReport {
        ccc_valence: headline[0],
        ccc_arousal: headline[1],
        mse_valence: errors[0],
        mse_arousal: errors[1],
        n_frames: pred.len(),
        baseline_ccc_valence: baseline[0],
        baseline_ccc_arousal: baseline[1],
        per_clip,
    })
}

impl MetricReport {
    /// Plain-text table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("frames evaluated: {}\n\n", self.n_frames));
        s.push_str(&format!("{:<12} {:>10} {:>10}\n", "", "valence", "arousal"));
        s.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4}\n",
            "CCC", self.ccc_valence, self.ccc_arousal
        ));
        s.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4}\n",
            "MSE", self.mse_valence, self.mse_arousal
        ));
        s.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4}\n\n",
            "CCC (mean)", self.baseline_ccc_valence, self.baseline_ccc_arousal
        ));
        s.push_str(&format!(
            "{:<24} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
            "clip", "frames", "ccc_v", "ccc_a", "mse_v", "mse_a"
        ));
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for c in &self.per_clip {
            s.push_str(&format!(
                "{:<24} {:>6} {:>9} {:>9} {:>9.4} {:>9.4}\n",
                c.clip_id,
                c.n_frames,
                fmt(c.ccc_valence),
                fmt(c.ccc_arousal),
                c.mse_valence,
                c.mse_arousal
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair<'a>(x: &'a [f64], y: &'a [f64]) -> SeriesPair<'a> {
        SeriesPair::new(x, y).unwrap()
    }

    #[test]
    fn identical_series_concord_perfectly() {
        let x = [0.1, 0.5, 0.2, 0.9];
        assert!((ccc(pair(&x, &x), CccMode::Strict).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_ramp_is_fully_discordant() {
        let v = ccc(pair(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), CccMode::Strict).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn strict_mode_rejects_constant_equal_series() {
        let x = [0.5, 0.5, 0.5];
        assert!(matches!(
            ccc(pair(&x, &x), CccMode::Strict),
            Err(Error::DegenerateCcc)
        ));
        assert_eq!(ccc(pair(&x, &x), CccMode::Loss).unwrap(), 0.0);
    }

    #[test]
    fn loss_examples() {
        let perfect = [[0.1, 0.2], [0.4, 0.9], [0.8, 0.5]];
        assert!(ccc_loss(&perfect, &perfect).unwrap().abs() < 1e-6);

        let truth = [[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]];
        let pred = [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]];
        assert!((ccc_loss(&pred, &truth).unwrap() - 1.0).abs() < 1e-6);

        let constant = [[0.5, 0.5]; 4];
        assert!((ccc_loss(&constant, &constant).unwrap() - 1.0).abs() < 1e-12);
        assert!(labels_degenerate(&constant));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(pair(&[0.3, 0.4], &[0.3, 0.4])), 0.0);
        assert_eq!(mse(pair(&[0.0, 0.0], &[1.0, 1.0])), 1.0);
    }

    #[test]
    fn series_pair_validation() {
        assert!(SeriesPair::new(&[1.0], &[1.0]).is_err());
        assert!(SeriesPair::new(&[1.0, 2.0], &[1.0]).is_err());
        assert!(SeriesPair::new(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let truth = [[0.1, 0.7], [0.3, 0.2], [0.9, 0.4], [0.6, 0.6], [0.2, 0.1]];
        let pred = [
            [0.2, 0.5],
            [0.25, 0.3],
            [0.7, 0.45],
            [0.4, 0.8],
            [0.3, 0.05],
        ];
        let (_, g) = ccc_loss_with_grad(&pred, &truth).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            for c in 0..2 {
                let mut p = pred;
                p[i][c] += h;
                let mut m = pred;
                m[i][c] -= h;
                let fd =
                    (ccc_loss(&p, &truth).unwrap() - ccc_loss(&m, &truth).unwrap()) / (2.0 * h);
                assert!((fd - g[i][c]).abs() < 1e-7, "{fd} vs {}", g[i][c]);
            }
        }
    }

    #[test]
    fn mean_predictor_has_zero_ccc() {
        let clips = vec![ClipSeries {
            clip_id: "a".into(),
            pred: vec![[0.2, 0.3], [0.4, 0.1], [0.9, 0.8]],
            truth: vec![[0.1, 0.2], [0.5, 0.1], [0.8, 0.9]],
        }];
        let r = evaluate(&clips, [0.5, 0.5]).unwrap();
        assert_eq!(r.baseline_ccc_valence, 0.0);
        assert_eq!(r.baseline_ccc_arousal, 0.0);
        assert_eq!(r.n_frames, 3);
        assert_eq!(r.per_clip.len(), 1);
        assert!(r.render_table().contains("CCC"));
    }
}
