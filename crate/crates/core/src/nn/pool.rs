use super::{Real, Tensor4};

/// Argmax positions (flat indices into the pooled input) for the backward pass.
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<u32>,
    in_shape: [usize; 4],
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn max_pool2x2<T: Real>(x: &Tensor4<T>) -> (Tensor4<T>, PoolCache) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    let mut argmax = vec![0u32; out.data.len()];
    let mut o = 0;
    for plane in 0..x.n * x.c {
        let base = plane * x.h * x.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                out.data[o] = x.data[best];
                argmax[o] = best as u32;
                o += 1;
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_shape: x.shape(),
        },
    )
}

pub fn max_pool2x2_backward<T: Real>(cache: &PoolCache, dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = cache.in_shape;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (g, &i) in dy.data.iter().zip(&cache.argmax) {
        dx.data[i as usize] += *g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_and_routes_gradient_to_max() {
        let x = Tensor4::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]);
        let (y, cache) = max_pool2x2(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dx = max_pool2x2_backward(&cache, &Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn halves_spatial_dims() {
        let x = Tensor4::<f32>::zeros(2, 3, 96, 96);
        let (y, _) = max_pool2x2(&x);
        assert_eq!(y.shape(), [2, 3, 48, 48]);
    }
}
