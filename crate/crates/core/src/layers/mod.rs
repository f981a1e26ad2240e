//! Trainable layers with hand-written backward passes.
//!
//! Every layer works on `[batch, channels, length]` tensors. A training-mode
//! `forward` caches what `backward` needs; `backward` accumulates into the
//! parameter gradient slots and returns the gradient w.r.t. the input.

mod batchnorm;
mod conv;
mod deconv;
mod lstm;
mod prelu;

pub use batchnorm::BatchNormLayer;
pub use conv::ConvLayer;
pub use deconv::DeconvLayer;
pub use lstm::LstmLayer;
pub use prelu::PReluLayer;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable array and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        Param::new(Tensor::from_vec(shape, data).expect("shape product matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns named parameters and persistent buffers.
pub trait Parameterized<T: Real> {
    /// Visit trainable parameters as `(path, param)`.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Visit non-trainable state that must survive a checkpoint round trip.
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    /// Set every trainable parameter to zero.
    fn zero_params(&mut self) {
        self.visit_params("", &mut |_, p| p.value.fill(T::zero()));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

pub trait Layer<T: Real>: Parameterized<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;
    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>>;

    /// Clear recurrent state between independent utterances.
    fn reset_state(&mut self) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
