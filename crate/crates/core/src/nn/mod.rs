//! Minimal 3D convolutional building blocks with hand-written backward
//! passes.
//!
//! Every layer offers three entry points: `infer` (evaluation, no caching),
//! `forward` (training: caches what `backward` needs and updates running
//! statistics) and `backward` (accumulates parameter gradients and returns
//! the input gradient). All reductions run in a fixed order so results do not
//! depend on the number of worker threads.

mod act;
mod conv;
mod gemm;
mod norm;
mod tensor;

pub use act::Relu;
pub use conv::{Conv3d, ConvTranspose3d};
pub use norm::BatchNorm3d;
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable parameter and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn filled(n: usize, v: f32) -> Self {
        Self {
            value: vec![v; n],
            grad: vec![0.0; n],
        }
    }

    /// He-normal initialization: `N(0, sqrt(2 / fan_in))`.
    pub fn he_normal<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            value: (0..n).map(|_| dist.sample(rng) as f32).collect(),
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor over parameters (trainable) and buffers (running statistics) in a
/// fixed, architecture-determined order.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>));
}
