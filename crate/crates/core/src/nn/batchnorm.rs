use serde::{Deserialize, Serialize};

use super::{ParamSet, Real, Tensor4};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Saved forward state for the training-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

impl<T> BnCache<T> {
    /// Normalized activations of the cached forward pass.
    pub fn xhat(&self) -> &[T] {
        &self.xhat
    }
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: vec![T::zero(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::zero(); c],
        }
    }

    /// Training mode: normalizes with batch statistics.
    pub fn forward_train(&self, x: &Tensor4<T>) -> (Tensor4<T>, BnCache<T>) {
        let c = x.c;
        let hw = x.h * x.w;
        let m = (x.n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for n in 0..x.n {
            let s = x.sample(n);
            for ch in 0..c {
                mean[ch] += s[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|v| v.f64())
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for n in 0..x.n {
            let s = x.sample(n);
            for ch in 0..c {
                let mu = mean[ch];
                var[ch] += s[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|v| (v.f64() - mu).powi(2))
                    .sum::<f64>();
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::of(1.0 / (v / m + EPS).sqrt()))
            .collect();
        let mut out = Tensor4::zeros(x.n, c, x.h, x.w);
        let mut xhat = vec![T::zero(); x.data.len()];
        for n in 0..x.n {
            let base = n * c * hw;
            for ch in 0..c {
                let mu = T::of(mean[ch]);
                let (g, b, is) = (self.gamma[ch], self.beta[ch], inv_std[ch]);
                for i in base + ch * hw..base + (ch + 1) * hw {
                    let xh = (x.data[i] - mu) * is;
                    xhat[i] = xh;
                    out.data[i] = g * xh + b;
                }
            }
        }
        let unbiased = var
            .iter()
            .map(|v| T::of(if m > 1.0 { v / (m - 1.0) } else { 0.0 }))
            .collect();
        let cache = BnCache {
            xhat,
            inv_std,
            batch_mean: mean.into_iter().map(T::of).collect(),
            batch_var_unbiased: unbiased,
        };
        (out, cache)
    }

    /// Inference mode: normalizes with running statistics.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let hw = x.h * x.w;
        let eps = T::of(EPS);
        let mut out = x.clone();
        for n in 0..x.n {
            let s = out.sample_mut(n);
            for ch in 0..x.c {
                let scale = self.gamma[ch] / (self.running_var[ch] + eps).sqrt();
                let shift = self.beta[ch] - self.running_mean[ch] * scale;
                s[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    /// Folds the batch statistics of a training forward into the running averages.
    pub fn commit_stats(&mut self, cache: &BnCache<T>) {
        let mom = T::of(MOMENTUM);
        let keep = T::one() - mom;
        for ch in 0..self.gamma.len() {
            self.running_mean[ch] = keep * self.running_mean[ch] + mom * cache.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + mom * cache.batch_var_unbiased[ch];
        }
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor4<T>, grad: &mut Self) -> Tensor4<T> {
        let c = dy.c;
        let hw = dy.h * dy.w;
        let m = T::of((dy.n * hw) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for n in 0..dy.n {
            let base = n * c * hw;
            for ch in 0..c {
                let r = base + ch * hw..base + (ch + 1) * hw;
                for (g, xh) in dy.data[r.clone()].iter().zip(&cache.xhat[r]) {
                    sum_dy[ch] += *g;
                    sum_dy_xhat[ch] += *g * *xh;
                }
            }
        }
        for ch in 0..c {
            grad.gamma[ch] += sum_dy_xhat[ch];
            grad.beta[ch] += sum_dy[ch];
        }
        let mut dx = Tensor4::zeros(dy.n, c, dy.h, dy.w);
        for n in 0..dy.n {
            let base = n * c * hw;
            for ch in 0..c {
                let k = self.gamma[ch] * cache.inv_std[ch] / m;
                for i in base + ch * hw..base + (ch + 1) * hw {
                    dx.data[i] =
                        k * (m * dy.data[i] - sum_dy[ch] - cache.xhat[i] * sum_dy_xhat[ch]);
                }
            }
        }
        dx
    }
}

impl<T> ParamSet<T> for BatchNorm2d<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![&self.gamma, &self.beta]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::from_vec(
            3,
            2,
            4,
            4,
            (0..96).map(|_| rng.gen_range(-3.0..5.0)).collect(),
        );
        let bn = BatchNorm2d::<f64>::new(2);
        let (y, _) = bn.forward_train(&x);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| y.sample(n)[ch * 16..(ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::from_vec(
            2,
            3,
            3,
            3,
            (0..54).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma = vec![0.5, 1.5, -1.0];
        bn.beta = vec![0.1, 0.0, 0.3];
        let r: Vec<f64> = (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |bn: &BatchNorm2d<f64>, x: &Tensor4<f64>| -> f64 {
            let (y, _) = bn.forward_train(x);
            y.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bn.forward_train(&x);
        let mut grad = bn.zeros_like();
        let dx = bn.backward(&cache, &Tensor4::from_vec(2, 3, 3, 3, r.clone()), &mut grad);
        let h = 1e-6;
        for idx in [0, 7, 20, 53] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!(
                (fd - dx.data[idx]).abs() < 1e-6,
                "dx[{idx}]: {fd} vs {}",
                dx.data[idx]
            );
        }
        for ch in 0..3 {
            let mut p = bn.clone();
            p.gamma[ch] += h;
            let mut m = bn.clone();
            m.gamma[ch] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad.gamma[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - EPS];
        let x = Tensor4::from_vec(1, 1, 1, 2, vec![2.0, 4.0]);
        let y = bn.forward_eval(&x);
        assert!((y.data[0]).abs() < 1e-12);
        assert!((y.data[1] - 1.0).abs() < 1e-12);
    }
}
