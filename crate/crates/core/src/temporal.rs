//! Temporal Gaussian attention filters.
//!
//! A filter places `N` Gaussians on the time axis around a center `g`, spaced
//! by a stride `delta` and sharing a width `sigma`. Each Gaussian becomes one
//! row of an `N x T` sampling matrix, normalized to sum to one, so that
//! multiplying it with a `T x D` feature sequence yields `N` attended feature
//! vectors regardless of `T`.
//!
//! The three parameters are stored unconstrained:
//! `g = (T - 1) * logistic(g_hat)`, `delta = exp(d_hat)`, `sigma = exp(s_hat)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor for a row's normalizer.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub g_hat: f64,
    pub d_hat: f64,
    pub s_hat: f64,
    /// Gaussians per filter.
    pub n: usize,
}

/// Gradient of a scalar loss with respect to the unconstrained parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterGrad {
    pub g_hat: f64,
    pub d_hat: f64,
    pub s_hat: f64,
}

impl FilterParams {
    /// Filter spanning a clip of `t_nominal` frames uniformly, unit width.
    pub fn spanning(n: usize, t_nominal: usize) -> Self {
        let d_hat = if n > 1 && t_nominal > 1 {
            ((t_nominal - 1) as f64 / (n - 1) as f64).ln()
        } else {
            0.0
        };
        Self {
            g_hat: 0.0,
            d_hat,
            s_hat: 0.0,
            n,
        }
    }

    pub fn center(&self, t: usize) -> f64 {
        t.saturating_sub(1) as f64 * logistic(self.g_hat)
    }

    pub fn stride(&self) -> f64 {
        self.d_hat.exp()
    }

    pub fn width(&self) -> f64 {
        self.s_hat.exp()
    }

    /// Offset of Gaussian `k` (0-based) from the center, in strides.
    fn offset(&self, k: usize) -> f64 {
        (k + 1) as f64 - (self.n + 1) as f64 / 2.0
    }

    pub fn means(&self, t: usize) -> Vec<f64> {
        let (g, d) = (self.center(t), self.stride());
        (0..self.n).map(|k| g + self.offset(k) * d).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("filter needs at least one Gaussian".into()));
        }
        if ![self.g_hat, self.d_hat, self.s_hat]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("filter parameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBankParams {
    pub filters: Vec<FilterParams>,
}

impl FilterBankParams {
    pub fn new(filters: usize, n: usize, t_nominal: usize) -> Self {
        Self {
            filters: vec![FilterParams::spanning(n, t_nominal); filters],
        }
    }

    /// Gaussians per filter (shared).
    pub fn n(&self) -> usize {
        self.filters.first().map_or(0, |f| f.n)
    }

    /// Rows produced by [`apply_filter_bank`].
    pub fn rows(&self) -> usize {
        self.filters.iter().map(|f| f.n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::Config(
                "filter bank needs at least one filter".into(),
            ));
        }
        let n = self.n();
        for f in &self.filters {
            f.validate()?;
            if f.n != n {
                return Err(Error::Config("filters in a bank share N".into()));
            }
        }
        Ok(())
    }
}

/// Row-normalized `N x T` Gaussian sampling matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMatrix {
    pub n: usize,
    pub t: usize,
    /// Row-major `n x t`.
    pub matrix: Vec<f64>,
    pub center: f64,
    pub stride: f64,
    pub width: f64,
}

impl SamplingMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.matrix[k * self.t..(k + 1) * self.t]
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds the sampling matrix for a sequence of `t >= 1` frames.
///
/// Rows are evaluated in the log domain and shifted by their maximum before
/// exponentiation; the shift cancels in the normalization, and keeps rows
/// summing to one when `sigma` is far below the tap spacing.
pub fn build_sampling_matrix(p: &FilterParams, t: usize) -> SamplingMatrix {
    assert!(t >= 1, "sampling matrix needs t >= 1");
    let sigma = p.width();
    let two_var = 2.0 * sigma * sigma;
    let mut matrix = vec![0.0; p.n * t];
    for (k, mu) in p.means(t).into_iter().enumerate() {
        let row = &mut matrix[k * t..(k + 1) * t];
        let mut peak = f64::NEG_INFINITY;
        for (ti, w) in row.iter_mut().enumerate() {
            *w = -(ti as f64 - mu).powi(2) / two_var;
            peak = peak.max(*w);
        }
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = (*w - peak).exp();
            sum += *w;
        }
        let z = sum.max(NORM_FLOOR);
        row.iter_mut().for_each(|w| *w /= z);
    }
    SamplingMatrix {
        n: p.n,
        t,
        matrix,
        center: p.center(t),
        stride: p.stride(),
        width: sigma,
    }
}

/// `features` is row-major `t x d`. Returns `(sum of N over filters) x d`,
/// filters concatenated in order.
pub fn apply_filter_bank(
    features: &[f64],
    t: usize,
    d: usize,
    bank: &FilterBankParams,
) -> Result<Vec<f64>> {
    if t == 0 || features.len() != t * d {
        return Err(Error::shape(
            format!("{t} x {d} features"),
            format!("{} values", features.len()),
        ));
    }
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("temporal features"));
    }
    let mut out = Vec::with_capacity(bank.rows() * d);
    for f in &bank.filters {
        let m = build_sampling_matrix(f, t);
        for k in 0..m.n {
            let row = m.row(k);
            out.extend(
                (0..d).map(|j| (0..t).map(|ti| row[ti] * features[ti * d + j]).sum::<f64>()),
            );
        }
    }
    Ok(out)
}

/// Chain rule from `upstream = dL/dW` (`N x T`) to the unconstrained parameters.
pub fn filter_gradients(p: &FilterParams, t: usize, upstream: &[f64]) -> FilterGrad {
    assert_eq!(upstream.len(), p.n * t, "upstream must be N x T");
    let m = build_sampling_matrix(p, t);
    let means = p.means(t);
    let sigma = m.width;
    let var = sigma * sigma;
    let s = logistic(p.g_hat);
    let dg_dghat = t.saturating_sub(1) as f64 * s * (1.0 - s);
    let delta = m.stride;

    let mut grad = FilterGrad::default();
    for k in 0..p.n {
        let w = m.row(k);
        let g = &upstream[k * t..(k + 1) * t];
        let g_bar: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
        let (mut d_mu, mut d_sigma) = (0.0, 0.0);
        for ti in 0..t {
            let a = w[ti] * (g[ti] - g_bar);
            let r = ti as f64 - means[k];
            d_mu += a * r / var;
            d_sigma += a * r * r / (var * sigma);
        }
        grad.g_hat += d_mu * dg_dghat;
        grad.d_hat += d_mu * p.offset(k) * delta;
        grad.s_hat += d_sigma * sigma;
    }
    grad
}

/// CSV dump of every sampling-matrix row of a bank, for plotting.
pub fn sampling_matrix_csv(bank: &FilterBankParams, t: usize) -> String {
    let mut s = String::from("filter,gaussian,center,stride,width");
    for ti in 0..t {
        s.push_str(&format!(",t{ti}"));
    }
    s.push('\n');
    for (fi, f) in bank.filters.iter().enumerate() {
        let m = build_sampling_matrix(f, t);
        for k in 0..m.n {
            s.push_str(&format!("{fi},{k},{},{},{}", m.center, m.stride, m.width));
            for v in m.row(k) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
    }
    s
}
