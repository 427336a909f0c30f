//! Dense Horn–Schunck optical flow and its 3-channel network encoding.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::imaging::{luminance, Plane};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Smoothness weight on [0, 1] intensities.
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once the mean per-pixel update magnitude falls below this.
    pub eps: f64,
    /// Over-relaxation factor of the in-place sweep; 1.0 is plain Gauss–Seidel.
    pub relaxation: f64,
    /// Flow magnitude (px/frame) that saturates the encoding.
    pub max_mag: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            max_iters: 200,
            eps: 1e-4,
            relaxation: 1.95,
            max_mag: 5.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("flow.alpha must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("flow.max_iters must be positive".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("flow.eps must be nonnegative".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::Config("flow.relaxation must lie in (0, 2)".into()));
        }
        if !(self.max_mag > 0.0) {
            return Err(Error::Config("flow.max_mag must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Mean update magnitude of the last sweep.
    pub residual: f64,
    pub iterations_run: usize,
    /// Mean update magnitude of every sweep.
    pub residual_trace: Vec<f64>,
}

impl FlowField {
    pub fn mean_u(&self) -> f64 {
        self.u.iter().sum::<f64>() / self.u.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Symmetric (edge-repeating) reflection of an index into `0..n`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i - 1).min(n as isize - 1) as usize
    } else if i >= n as isize {
        (2 * n as isize - i - 1).max(0) as usize
    } else {
        i as usize
    }
}

/// Spatio-temporal derivatives averaged over the 2x2x2 cube at each pixel.
fn derivatives(a: &Plane, b: &Plane) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let (mut ix, mut iy, mut it) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h {
        let yn = reflect(y as isize + 1, h);
        for x in 0..w {
            let xn = reflect(x as isize + 1, w);
            let (a00, a01, a10, a11) = (a.at(x, y), a.at(xn, y), a.at(x, yn), a.at(xn, yn));
            let (b00, b01, b10, b11) = (b.at(x, y), b.at(xn, y), b.at(x, yn), b.at(xn, yn));
            let i = y * w + x;
            ix[i] = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10));
            iy[i] = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01));
            it[i] = 0.25 * ((b00 - a00) + (b01 - a01) + (b10 - a10) + (b11 - a11));
        }
    }
    (ix, iy, it)
}

/// Horn–Schunck flow from `a` to `b`, both grayscale in [0, 1].
///
/// Each sweep visits pixels in raster order and applies
/// `u <- ubar - Ix (Ix ubar + Iy vbar + It) / (alpha^2 + Ix^2 + Iy^2)` (and
/// likewise for `v`) in place, over-relaxed by `cfg.relaxation`. `ubar`, `vbar`
/// are 4-neighbour means with reflected borders. Starts from zero flow.
pub fn horn_schunck(a: &Plane, b: &Plane, cfg: &FlowConfig) -> Result<FlowField> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    if a.width == 0 || a.height == 0 {
        return Err(Error::shape("nonempty frames", "empty frame"));
    }
    if !a.data.iter().chain(&b.data).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("flow input"));
    }
    cfg.validate()?;
    let (w, h) = (a.width, a.height);
    let (ix, iy, it) = derivatives(a, b);
    let alpha2 = cfg.alpha * cfg.alpha;
    let denom: Vec<f64> = ix
        .iter()
        .zip(&iy)
        .map(|(x, y)| alpha2 + x * x + y * y)
        .collect();
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let omega = cfg.relaxation;
    for _ in 0..cfg.max_iters {
        let mut total = 0.0;
        for y in 0..h {
            let (yu, yd) = (reflect(y as isize - 1, h), reflect(y as isize + 1, h));
            for x in 0..w {
                let (xl, xr) = (reflect(x as isize - 1, w), reflect(x as isize + 1, w));
                let i = y * w + x;
                let (n_up, n_dn, n_l, n_r) = (yu * w + x, yd * w + x, y * w + xl, y * w + xr);
                let ubar = 0.25 * (u[n_up] + u[n_dn] + u[n_l] + u[n_r]);
                let vbar = 0.25 * (v[n_up] + v[n_dn] + v[n_l] + v[n_r]);
                let c = (ix[i] * ubar + iy[i] * vbar + it[i]) / denom[i];
                let du = omega * (ubar - ix[i] * c - u[i]);
                let dv = omega * (vbar - iy[i] * c - v[i]);
                u[i] += du;
                v[i] += dv;
                total += (du * du + dv * dv).sqrt();
            }
        }
        let mean_update = total / (w * h) as f64;
        trace.push(mean_update);
        if mean_update < cfg.eps {
            break;
        }
    }
    Ok(FlowField {
        width: w,
        height: h,
        u,
        v,
        residual: trace.last().copied().unwrap_or(0.0),
        iterations_run: trace.len(),
        residual_trace: trace,
    })
}

/// Flow as three channels `(u, v, magnitude)`, each in [0, 1], interleaved HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEncoding {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FlowEncoding {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            image::Rgb(p.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }
}

pub fn encode_flow(flow: &FlowField, max_mag: f64) -> FlowEncoding {
    assert!(max_mag > 0.0, "max_mag must be positive");
    let mut data = Vec::with_capacity(3 * flow.u.len());
    for (&u, &v) in flow.u.iter().zip(&flow.v) {
        data.push((u / (2.0 * max_mag) + 0.5).clamp(0.0, 1.0) as f32);
        data.push((v / (2.0 * max_mag) + 0.5).clamp(0.0, 1.0) as f32);
        data.push(((u * u + v * v).sqrt() / max_mag).clamp(0.0, 1.0) as f32);
    }
    FlowEncoding {
        width: flow.width,
        height: flow.height,
        data,
    }
}

/// Flows between consecutive crops, front-padded with a copy of the first
/// encoding so the output has one entry per input crop.
pub fn flow_sequence(crops: &[RgbImage], cfg: &FlowConfig) -> Result<Vec<FlowEncoding>> {
    if crops.len() < 2 {
        return Err(Error::Invalid(format!(
            "flow sequence needs at least 2 crops, got {}",
            crops.len()
        )));
    }
    let gray: Vec<Plane> = crops.iter().map(luminance).collect();
    let mut out = Vec::with_capacity(crops.len());
    for pair in gray.windows(2) {
        let f = horn_schunck(&pair[0], &pair[1], cfg)?;
        out.push(encode_flow(&f, cfg.max_mag));
    }
    out.insert(0, out[0].clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(cx: f64, cy: f64, sigma: f64) -> Plane {
        Plane::from_fn(96, 96, |x, y| {
            (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = blob(40.0, 50.0, 6.0);
        let f = horn_schunck(&a, &a, &FlowConfig::default()).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn textureless_frames_give_zero_flow() {
        let a = Plane::from_fn(96, 96, |_, _| 0.3);
        let b = Plane::from_fn(96, 96, |_, _| 0.3);
        let f = horn_schunck(&a, &b, &FlowConfig::default()).unwrap();
        assert!(f.max_abs() < 1e-12);
    }

    #[test]
    fn recovers_one_pixel_translation() {
        let a = blob(47.5, 47.5, 6.0);
        let b = blob(48.5, 47.5, 6.0);
        let cfg = FlowConfig {
            eps: 0.0,
            ..FlowConfig::default()
        };
        let f = horn_schunck(&a, &b, &cfg).unwrap();
        let support: Vec<usize> = (0..a.data.len())
            .filter(|&i| a.data[i].max(b.data[i]) > 0.05)
            .collect();
        let mean_u = support.iter().map(|&i| f.u[i]).sum::<f64>() / support.len() as f64;
        let mean_v = support.iter().map(|&i| f.v[i].abs()).sum::<f64>() / support.len() as f64;
        assert!((0.7..=1.3).contains(&mean_u), "mean u {mean_u}");
        assert!(mean_v < 0.2);
        for w in f.residual_trace[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Plane::new(4, 4);
        let b = Plane::new(5, 4);
        assert!(horn_schunck(&a, &b, &FlowConfig::default()).is_err());
        let mut c = Plane::new(4, 4);
        c.data[3] = f64::NAN;
        assert!(horn_schunck(&a, &c, &FlowConfig::default()).is_err());
    }

    #[test]
    fn encoding_examples() {
        let zero = FlowField {
            width: 2,
            height: 1,
            u: vec![0.0, 5.0],
            v: vec![0.0, 0.0],
            residual: 0.0,
            iterations_run: 0,
            residual_trace: vec![],
        };
        let e = encode_flow(&zero, 5.0);
        assert_eq!(e.pixel(0, 0), [0.5, 0.5, 0.0]);
        assert_eq!(e.pixel(1, 0), [1.0, 0.5, 1.0]);
        let neg = FlowField {
            u: vec![-15.0, 0.0],
            ..zero
        };
        assert_eq!(encode_flow(&neg, 5.0).pixel(0, 0)[0], 0.0);
    }

    #[test]
    fn sequence_is_front_padded() {
        let crops: Vec<RgbImage> = (0..4)
            .map(|k| {
                RgbImage::from_fn(96, 96, |x, y| {
                    let d = (x as f64 - 40.0 - k as f64).powi(2) + (y as f64 - 48.0).powi(2);
                    image::Rgb([(255.0 * (-d / 72.0).exp()) as u8; 3])
                })
            })
            .collect();
        let seq = flow_sequence(&crops, &FlowConfig::default()).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq[0], seq[1]);
        assert!(flow_sequence(&crops[..1], &FlowConfig::default()).is_err());
    }
}
