//! Batch normalization over the leading (batch) axis and any trailing
//! spatial axes, one (γ, β) pair per channel on axis 1.
//!
//! Train mode normalizes with the biased batch variance and folds the
//! unbiased variance into the running estimate; eval mode uses the running
//! estimates only.

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
    /// Train mode only: per-channel batch mean and unbiased variance.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn layout<T: Scalar>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    let s = input.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(Error::Shape(format!(
            "batch norm over {channels} channels got input {s:?}"
        )));
    }
    Ok((s[0], s[2..].iter().product()))
}

/// Running statistics are read (eval mode) but never written here; see
/// [`update_running_stats`].
pub fn batchnorm_forward<T: Scalar>(
    name: &str,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let channels = gamma.len();
    let (batch, spatial) = layout(input, channels)?;
    if mode == Mode::Train && batch < 2 {
        return Err(Error::BatchTooSmall { layer: name.to_string(), batch });
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let n = batch * spatial;
    let count = T::from_usize_lossy(n);
    let x = input.data();
    let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;

    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = vec![T::zero(); channels];
    let mut batch_mean = vec![];
    let mut batch_var = vec![];
    for c in 0..channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for b in 0..batch {
                    for s in 0..spatial {
                        sum += x[index(b, c, s)];
                    }
                }
                let mean = sum / count;
                let mut sq = T::zero();
                for b in 0..batch {
                    for s in 0..spatial {
                        let d = x[index(b, c, s)] - mean;
                        sq += d * d;
                    }
                }
                let var = sq / count;
                batch_mean.push(mean);
                batch_var.push(sq / T::from_usize_lossy(n - 1));
                (mean, var)
            }
            Mode::Eval => (running_mean.data()[c], running_var.data()[c]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        let (g, bt) = (gamma.data()[c], beta.data()[c]);
        for b in 0..batch {
            for s in 0..spatial {
                let i = index(b, c, s);
                let xh = (x[i] - mean) * istd;
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + bt;
            }
        }
    }
    let batch_stats = (mode == Mode::Train).then_some((batch_mean, batch_var));
    Ok((out, BatchNormCache { normalized, inv_std, mode, batch_stats }))
}

/// Exponential moving average update (momentum [`BN_MOMENTUM`]) from a
/// train-mode forward pass. No-op for eval-mode caches.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    cache: &BatchNormCache<T>,
) {
    let Some((mean, var)) = cache.batch_stats.as_ref() else {
        return;
    };
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(var) {
        *r = keep * *r + m * b;
    }
}

pub fn batchnorm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let channels = gamma.len();
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::Shape(format!(
            "batch norm grad_out {:?} does not match cached {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let (batch, spatial) = layout(grad_out, channels)?;
    let n = T::from_usize_lossy(batch * spatial);
    let gy = grad_out.data();
    let xh = cache.normalized.data();
    let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;

    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gg = Tensor::zeros(&[channels]);
    let mut gb = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let (mut sum_gy, mut sum_gy_xh) = (T::zero(), T::zero());
        for b in 0..batch {
            for s in 0..spatial {
                let i = index(b, c, s);
                sum_gy += gy[i];
                sum_gy_xh += gy[i] * xh[i];
            }
        }
        gg.data_mut()[c] = sum_gy_xh;
        gb.data_mut()[c] = sum_gy;
        let scale = gamma.data()[c] * cache.inv_std[c];
        for b in 0..batch {
            for s in 0..spatial {
                let i = index(b, c, s);
                gx.data_mut()[i] = match cache.mode {
                    Mode::Train => scale * (gy[i] - (sum_gy + xh[i] * sum_gy_xh) / n),
                    Mode::Eval => scale * gy[i],
                };
            }
        }
    }
    Ok(BatchNormGrads { input: gx, gamma: gg, beta: gb })
}
