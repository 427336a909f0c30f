use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{he_normal, matmul, matmul_nt, matmul_tn, ParamSet, Real, Tensor4};

/// 3x3 convolution with padding 1 and a configurable stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out_channels x (in_channels * 9)`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

const K: usize = 3;
const PAD: usize = 1;

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * K * K;
        Self {
            in_channels,
            out_channels,
            stride,
            weight: he_normal(out_channels * fan_in, fan_in, rng),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * PAD - K) / self.stride + 1,
            (w + 2 * PAD - K) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (oh, ow) = self.output_hw(h, w);
        let s = self.stride;
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = (ci * K + ky) * K + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - PAD as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - PAD as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.output_hw(h, w);
        let s = self.stride;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = (ci * K + ky) * K + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(x.h, x.w);
        let kk = self.in_channels * K * K;
        let p = oh * ow;
        let mut out = Tensor4::zeros(x.n, self.out_channels, oh, ow);
        let mut col = vec![T::zero(); kk * p];
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, &mut col);
            let y = out.sample_mut(i);
            for (co, b) in self.bias.iter().enumerate() {
                y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *b);
            }
            matmul(self.out_channels, kk, p, &self.weight, &col, T::one(), y);
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient
    /// when `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        grad: &mut Self,
        want_input_grad: bool,
    ) -> Option<Tensor4<T>> {
        let (oh, ow) = self.output_hw(x.h, x.w);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (x.n, self.out_channels, oh, ow));
        let kk = self.in_channels * K * K;
        let p = oh * ow;
        let mut col = vec![T::zero(); kk * p];
        let mut dcol = vec![T::zero(); kk * p];
        let mut dx = want_input_grad.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let g = dy.sample(i);
            for co in 0..self.out_channels {
                grad.bias[co] += g[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
            self.im2col(x.sample(i), x.h, x.w, &mut col);
            matmul_nt(
                self.out_channels,
                p,
                kk,
                g,
                &col,
                T::one(),
                &mut grad.weight,
            );
            if let Some(dx) = dx.as_mut() {
                matmul_tn(
                    kk,
                    self.out_channels,
                    p,
                    &self.weight,
                    g,
                    T::zero(),
                    &mut dcol,
                );
                self.col2im(&dcol, x.h, x.w, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl<T> ParamSet<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![&self.weight, &self.bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(conv: &Conv2d<f64>, x: &Tensor4<f64>) -> Tensor4<f64> {
        let (oh, ow) = conv.output_hw(x.h, x.w);
        let mut out = Tensor4::zeros(x.n, conv.out_channels, oh, ow);
        for n in 0..x.n {
            for co in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[co];
                        for ci in 0..conv.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * conv.stride + ky) as isize - 1;
                                    let ix = (ox * conv.stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.data
                                        [((n * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += conv.weight
                                        [((co * conv.in_channels + ci) * 3 + ky) * 3 + kx]
                                        * xv;
                                }
                            }
                        }
                        out.data[((n * conv.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
        Tensor4::from_vec(
            n,
            c,
            h,
            w,
            (0..n * c * h * w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut conv = Conv2d::<f64>::new(2, 3, stride, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3];
            let x = random_input(&mut rng, 2, 2, 7, 6);
            let got = conv.forward(&x);
            let want = naive(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for stride in [1, 2] {
            let conv = Conv2d::<f64>::new(2, 2, stride, &mut rng);
            let x = random_input(&mut rng, 2, 2, 5, 5);
            let y = conv.forward(&x);
            let r: Vec<f64> = (0..y.data.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let loss = |c: &Conv2d<f64>, x: &Tensor4<f64>| -> f64 {
                c.forward(x).data.iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let dy = Tensor4::from_vec(y.n, y.c, y.h, y.w, r.clone());
            let mut grad = conv.zeros_like();
            let dx = conv.backward(&x, &dy, &mut grad, true).unwrap();
            let h = 1e-6;
            for idx in [0, 5, 17, conv.weight.len() - 1] {
                let mut p = conv.clone();
                p.weight[idx] += h;
                let mut m = conv.clone();
                m.weight[idx] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((fd - grad.weight[idx]).abs() < 1e-6, "dW[{idx}]");
            }
            for idx in [0, 13, 31, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += h;
                let mut xm = x.clone();
                xm.data[idx] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx.data[idx]).abs() < 1e-6, "dx[{idx}]");
            }
            let bias_fd: f64 = (0..y.h * y.w).map(|i| r[i]).sum::<f64>()
                + (0..y.h * y.w).map(|i| r[y.sample_len() + i]).sum::<f64>();
            assert!((grad.bias[0] - bias_fd).abs() < 1e-12);
        }
    }
}
