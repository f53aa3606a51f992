//! Layer primitives with explicit forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod linear;
mod sequential;

pub use activation::{dropout_backward, dropout_forward, relu_backward, relu_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, update_running_stats, BatchNormCache, BN_EPS, BN_MOMENTUM,
};
pub use conv::{conv1d_backward, conv1d_forward, conv2d_backward, conv2d_forward, ConvGrads};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use sequential::{Gradients, Layer, LayerKind, Sequential, Tape};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable tensors of one layer. For batch norm `weight` is γ and `bias`
/// is β, and the running statistics are present.
///
/// Shapes are fixed at construction; only values are mutable.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    running: Option<(Tensor<T>, Tensor<T>)>,
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

impl<T: Scalar> LayerState<T> {
    pub fn conv2d<R: Rng + ?Sized>(cin: usize, cout: usize, kh: usize, kw: usize, rng: &mut R) -> Self {
        LayerState {
            weight: he_uniform(&[cout, cin, kh, kw], cin * kh * kw, rng),
            bias: Tensor::zeros(&[cout]),
            running: None,
        }
    }

    pub fn conv1d<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        LayerState {
            weight: he_uniform(&[cout, cin, k], cin * k, rng),
            bias: Tensor::zeros(&[cout]),
            running: None,
        }
    }

    pub fn linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        LayerState {
            weight: he_uniform(&[fan_out, fan_in], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]),
            running: None,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerState {
            weight: Tensor::full(&[channels], T::one()),
            bias: Tensor::zeros(&[channels]),
            running: Some((Tensor::zeros(&[channels]), Tensor::full(&[channels], T::one()))),
        }
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        self.weight.data_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        self.bias.data_mut()
    }

    pub fn running_mean(&self) -> Option<&Tensor<T>> {
        self.running.as_ref().map(|r| &r.0)
    }

    pub fn running_var(&self) -> Option<&Tensor<T>> {
        self.running.as_ref().map(|r| &r.1)
    }

    /// Overwrites the running statistics. Variances must be strictly positive.
    pub fn set_running(&mut self, mean: &[T], var: &[T]) -> crate::Result<()> {
        let Some((m, v)) = self.running.as_mut() else {
            return Err(crate::Error::InvalidArgument("layer has no running statistics".into()));
        };
        if mean.len() != m.len() || var.len() != v.len() {
            return Err(crate::Error::Shape(format!(
                "running statistics expect {} values, got {} and {}",
                m.len(),
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&x| !(x > T::zero())) {
            return Err(crate::Error::InvalidArgument("running variance must be positive".into()));
        }
        m.data_mut().copy_from_slice(mean);
        v.data_mut().copy_from_slice(var);
        Ok(())
    }

    pub(crate) fn running_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        self.running.as_mut().map(|(m, v)| (m, v))
    }

    /// Learnable parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerState<U> {
        LayerState {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            running: self.running.as_ref().map(|(m, v)| (m.cast(), v.cast())),
        }
    }
}
