use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot_uniform, matmul, matmul_nt, matmul_tn, ParamSet, Real};

/// Fully connected layer on row-major `batch x in` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: glorot_uniform(inputs * outputs, inputs, outputs, rng),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * self.inputs, "linear input size");
        let mut y: Vec<T> = (0..batch).flat_map(|_| self.bias.iter().copied()).collect();
        matmul_nt(
            batch,
            self.inputs,
            self.outputs,
            x,
            &self.weight,
            T::one(),
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &[T], dy: &[T], batch: usize, grad: &mut Self) -> Vec<T> {
        assert_eq!(dy.len(), batch * self.outputs);
        for row in dy.chunks_exact(self.outputs) {
            for (b, g) in grad.bias.iter_mut().zip(row) {
                *b += *g;
            }
        }
        matmul_tn(
            self.outputs,
            batch,
            self.inputs,
            dy,
            x,
            T::one(),
            &mut grad.weight,
        );
        let mut dx = vec![T::zero(); batch * self.inputs];
        matmul(
            batch,
            self.outputs,
            self.inputs,
            dy,
            &self.weight,
            T::zero(),
            &mut dx,
        );
        dx
    }
}

impl<T> ParamSet<T> for Linear<T> {
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

    #[test]
    fn forward_and_backward_match_hand_computation() {
        let lin = Linear::<f64> {
            inputs: 2,
            outputs: 3,
            weight: vec![1.0, 2.0, 0.0, -1.0, 3.0, 1.0],
            bias: vec![0.5, 0.0, -0.5],
        };
        let x = vec![1.0, 1.0, 2.0, -1.0];
        let y = lin.forward(&x, 2);
        assert_eq!(y, vec![3.5, -1.0, 3.5, 0.5, 1.0, 4.5]);
        let dy = vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        let mut grad = lin.zeros_like();
        let dx = lin.backward(&x, &dy, 2, &mut grad);
        assert_eq!(dx, vec![1.0, 2.0, 3.0, 0.0]);
        assert_eq!(grad.bias, vec![1.0, 1.0, 1.0]);
        assert_eq!(grad.weight, vec![1.0, 1.0, 2.0, -1.0, 2.0, -1.0]);
    }

    #[test]
    fn init_is_seeded() {
        let a = Linear::<f32>::new(4, 5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Linear::<f32>::new(4, 5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
