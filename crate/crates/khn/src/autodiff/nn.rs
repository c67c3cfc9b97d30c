//! Fully-connected building blocks shared by the encoder, the kernel
//! transform, and the hypernetwork.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::Result;

/// One dense layer. Weight is `[out, in]`, bias `[out]`.
#[derive(Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Weights uniform in +-sqrt(1/fan_in), biases zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<LinearLayer> {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Ok(LinearLayer {
            weight: Tensor::parameter(weight, &[out_dim, in_dim])?,
            bias: Tensor::parameter(vec![0.0; out_dim], &[out_dim])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x W^T + b` over a batch of rows.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let wt = tape.transpose(&self.weight)?;
        tape.add(&tape.matmul(x, &wt)?, &self.bias)
    }
}

/// Dense layers with ReLU between consecutive layers and a linear output.
pub fn mlp_forward(tape: &Tape, layers: &[LinearLayer], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            h = tape.relu(&h)?;
        }
        h = layer.forward(tape, &h)?;
    }
    Ok(h)
}

/// Layer sizes `in -> hidden... -> out`, initialized in order from `rng`.
pub fn init_mlp(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<LinearLayer>> {
    dims.windows(2)
        .map(|p| LinearLayer::init(p[0], p[1], rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::seed_rng;

    #[test]
    fn init_is_deterministic_per_seed_and_bounded() {
        let a = LinearLayer::init(16, 8, &mut seed_rng(3, 0)).unwrap();
        let b = LinearLayer::init(16, 8, &mut seed_rng(3, 0)).unwrap();
        let c = LinearLayer::init(16, 8, &mut seed_rng(4, 0)).unwrap();
        assert_eq!(a.weight.to_vec(), b.weight.to_vec());
        assert_ne!(a.weight.to_vec(), c.weight.to_vec());
        let bound = (1.0f64 / 16.0).sqrt();
        assert!(a.weight.to_vec().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_depth_mlp_is_identity() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let y = mlp_forward(&tape, &[], &x).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
    }
}
