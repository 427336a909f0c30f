use serde::{Deserialize, Serialize};

use super::{ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers, in `ParamSet::tensors` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamSet<T>>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            config,
            state: AdamState {
                step: 0,
                m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
                v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            },
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let step_size = T::of(lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t)));
        let eps = T::of(c.eps);
        let grads = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.state.m.iter_mut())
            .zip(self.state.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Vec<f64>);
    impl ParamSet<f64> for Quad {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Quad(vec![3.0, -2.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let g = Quad(p.0.iter().map(|x| 2.0 * x).collect());
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-3), "{:?}", p.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Quad(vec![1.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &Quad(vec![0.3]), 0.1);
        assert!((p.0[0] - 0.9).abs() < 1e-6);
    }
}
