//! Browser bindings for three pieces of the pipeline: the temporal attention
//! filter, Horn-Schunck flow and CLAHE.

use affect_core::flow::{horn_schunck, FlowConfig};
use affect_core::imaging::Plane;
use affect_core::preprocess::{clahe_plane, ClaheConfig};
use affect_core::temporal::{build_sampling_matrix, FilterParams};
use wasm_bindgen::prelude::*;

fn js_err(e: affect_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Row-major `n x t` sampling matrix followed by `[center, stride, width]`.
#[wasm_bindgen]
pub fn sampling_matrix(
    g_hat: f64,
    d_hat: f64,
    s_hat: f64,
    n: usize,
    t: usize,
) -> Result<Vec<f64>, JsValue> {
    let p = FilterParams {
        g_hat,
        d_hat,
        s_hat,
        n,
    };
    p.validate().map_err(js_err)?;
    if t == 0 {
        return Err(JsValue::from_str("need at least one frame"));
    }
    let m = build_sampling_matrix(&p, t);
    let mut out = m.matrix;
    out.extend([m.center, m.stride, m.width]);
    Ok(out)
}

fn blob(size: usize, cx: f64, cy: f64) -> Plane {
    let s2 = 2.0 * (size as f64 / 8.0).powi(2);
    Plane::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (-(dx * dx + dy * dy) / s2).exp()
    })
}

/// Flow from a Gaussian blob to a copy shifted by `(dx, dy)`.
/// Returns `u` then `v`, each `size * size`, row-major.
#[wasm_bindgen]
pub fn blob_flow(
    size: usize,
    dx: f64,
    dy: f64,
    alpha: f64,
    iters: usize,
) -> Result<Vec<f64>, JsValue> {
    if !(8..=128).contains(&size) {
        return Err(JsValue::from_str("size must lie in 8..=128"));
    }
    let c = size as f64 / 2.0;
    let cfg = FlowConfig {
        alpha,
        max_iters: iters,
        eps: 0.0,
        ..FlowConfig::default()
    };
    cfg.validate().map_err(js_err)?;
    let f = horn_schunck(&blob(size, c, c), &blob(size, c + dx, c + dy), &cfg).map_err(js_err)?;
    let mut out = f.u;
    out.extend(f.v);
    Ok(out)
}

/// A dim, unevenly lit test card and its equalized version side by side,
/// as RGBA of size `2 * size x size`.
#[wasm_bindgen]
pub fn clahe_demo(size: usize, clip_limit: f64, tiles: usize) -> Result<Vec<u8>, JsValue> {
    if !(16..=512).contains(&size) {
        return Err(JsValue::from_str("size must lie in 16..=512"));
    }
    let cfg = ClaheConfig {
        clip_limit,
        tile_grid: (tiles, tiles),
    };
    cfg.validate().map_err(js_err)?;
    let s = size as f64;
    let card: Vec<u8> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / s, (i / size) as f64 / s);
            let light = 20.0 + 60.0 * x;
            let rings = ((x - 0.5).hypot(y - 0.5) * 40.0).sin();
            let checks = if ((x * 8.0) as usize + (y * 8.0) as usize) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            (light + 6.0 * rings + 4.0 * checks).clamp(0.0, 255.0) as u8
        })
        .collect();
    let eq = clahe_plane(&card, size, size, &cfg).map_err(js_err)?;
    let mut rgba = Vec::with_capacity(2 * size * size * 4);
    for y in 0..size {
        for v in card[y * size..(y + 1) * size]
            .iter()
            .chain(&eq[y * size..(y + 1) * size])
        {
            rgba.extend([*v, *v, *v, 255]);
        }
    }
    Ok(rgba)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rows_are_normalized() {
        let out = sampling_matrix(0.3, 0.5, -0.2, 4, 12).unwrap();
        assert_eq!(out.len(), 4 * 12 + 3);
        for r in 0..4 {
            let s: f64 = out[r * 12..(r + 1) * 12].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shifted_blob_moves_right() {
        let size = 32;
        let out = blob_flow(size, 1.0, 0.0, 1.0, 200).unwrap();
        let (u, v) = out.split_at(size * size);
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(u) > 0.0);
        assert!(mean(u) > mean(v).abs());
    }

    #[test]
    fn clahe_output_is_side_by_side() {
        let out = clahe_demo(64, 3.0, 4).unwrap();
        assert_eq!(out.len(), 2 * 64 * 64 * 4);
        let spread = |off: usize| {
            let vals: Vec<u8> = (0..64 * 64)
                .map(|i| out[((i / 64) * 128 + off + i % 64) * 4])
                .collect();
            vals.iter().max().unwrap() - vals.iter().min().unwrap()
        };
        assert!(spread(64) > spread(0));
    }
}
