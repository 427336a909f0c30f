//! Small raster helpers shared by preprocessing, flow, heatmaps and plots.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::{Error, Result};

/// Side length of every network input.
pub const CROP_SIZE: u32 = 96;

/// Single-channel floating point image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with clamp-to-edge addressing.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// ITU-R 601 luma in [0, 1].
pub fn luminance(img: &RgbImage) -> Plane {
    Plane::from_fn(img.width() as usize, img.height() as usize, |x, y| {
        let Rgb([r, g, b]) = *img.get_pixel(x as u32, y as u32);
        (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
    })
}

/// Axis-aligned box in continuous pixel coordinates, `x1 > x0`, `y1 > y0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn bounding(points: &[[f64; 2]]) -> Self {
        let mut b = PixelBox {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for [x, y] in points {
            b.x0 = b.x0.min(*x);
            b.y0 = b.y0.min(*y);
            b.x1 = b.x1.max(*x);
            b.y1 = b.y1.max(*y);
        }
        b
    }

    /// Grows each side by `margin` times the box width (horizontally) or height (vertically).
    pub fn expand(&self, margin: f64) -> Self {
        let (dx, dy) = (self.width() * margin, self.height() * margin);
        PixelBox {
            x0: self.x0 - dx,
            y0: self.y0 - dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        PixelBox {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        PixelBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }
}

/// Bilinear resample of `bx` (pixel-edge coordinates) into an `out_w x out_h` image.
pub fn crop_resize(img: &RgbImage, bx: &PixelBox, out_w: u32, out_h: u32) -> RgbImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let sx = bx.width() / out_w as f64;
    let sy = bx.height() / out_h as f64;
    let raw = img.as_raw();
    let stride = img.width() as usize * 3;
    RgbImage::from_fn(out_w, out_h, |ox, oy| {
        let x = (bx.x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, w - 1.0);
        let y = (bx.y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, h - 1.0);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let x1 = (x0 + 1).min(img.width() as usize - 1);
        let y1 = (y0 + 1).min(img.height() as usize - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let p = |xx: usize, yy: usize| raw[yy * stride + xx * 3 + c] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *out = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = Plane::new(p.width, p.height);
    for y in 0..p.height {
        for x in 0..p.width {
            tmp.data[y * p.width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * p.at(reflect(x as isize + k as isize - radius, p.width), y))
                .sum();
        }
    }
    let mut out = Plane::new(p.width, p.height);
    for y in 0..p.height {
        for x in 0..p.width {
            out.data[y * p.width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp.at(x, reflect(y as isize + k as isize - radius, p.height)))
                .sum();
        }
    }
    out
}

/// Converts an RGB image to a CHW float buffer in [0, 1].
pub fn to_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::image(path, e))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Draws a 1-2 px line segment (for plots).
pub fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1) * 2;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        for (dx, dy) in [(0.0, 0.0), (0.0, 1.0)] {
            let (px, py) = ((x + dx).round(), (y + dy).round());
            if px >= 0.0 && py >= 0.0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_arithmetic() {
        let b = PixelBox::bounding(&[[10.0, 20.0], [50.0, 60.0], [30.0, 40.0]]);
        assert_eq!(
            b,
            PixelBox {
                x0: 10.0,
                y0: 20.0,
                x1: 50.0,
                y1: 60.0
            }
        );
        let e = b.expand(0.2);
        assert_eq!(
            e,
            PixelBox {
                x0: 2.0,
                y0: 12.0,
                x1: 58.0,
                y1: 68.0
            }
        );
        let c = e.clamp_to(40, 64);
        assert_eq!(c.x1, 40.0);
        assert_eq!(c.y1, 64.0);
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = RgbImage::from_pixel(50, 30, Rgb([10, 200, 30]));
        let out = crop_resize(
            &img,
            &PixelBox {
                x0: 3.0,
                y0: 2.0,
                x1: 40.0,
                y1: 29.0,
            },
            96,
            96,
        );
        assert_eq!(out.dimensions(), (96, 96));
        assert!(out.pixels().all(|p| *p == Rgb([10, 200, 30])));
    }

    #[test]
    fn blur_preserves_mass_and_constants() {
        let p = Plane::from_fn(20, 10, |_, _| 0.4);
        let b = gaussian_blur(&p, 2.0);
        assert!(b.data.iter().all(|v| (v - 0.4).abs() < 1e-12));
        let mut impulse = Plane::new(21, 21);
        impulse.data[10 * 21 + 10] = 1.0;
        let b = gaussian_blur(&impulse, 1.5);
        assert!((b.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(b.at(10, 10), b.max());
    }
}
