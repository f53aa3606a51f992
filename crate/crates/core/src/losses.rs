//! Squared error, class-weighted cross entropy and the combined loss, plus
//! the Gaussian smoothing used for class weights and soft targets.
//!
//! Smoothing parameters are stated in bpm and converted to class-index units
//! through the grid step: a 13 bpm window becomes 19 taps (nearest odd
//! count), σ = 13/3 bpm becomes 6.53 taps for class weights and σ = 13/6 bpm
//! becomes 3.26 taps for soft targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SMOOTHING_WINDOW_BPM: f64 = 13.0;
pub const DEFAULT_ALPHA: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingSpec {
    pub window_bpm: f64,
    pub sigma_bpm: f64,
}

impl SmoothingSpec {
    pub const CLASS_WEIGHTS: SmoothingSpec =
        SmoothingSpec { window_bpm: SMOOTHING_WINDOW_BPM, sigma_bpm: SMOOTHING_WINDOW_BPM / 3.0 };
    pub const ONE_HOT: SmoothingSpec =
        SmoothingSpec { window_bpm: SMOOTHING_WINDOW_BPM, sigma_bpm: SMOOTHING_WINDOW_BPM / 6.0 };

    /// Kernel length in class indices: nearest odd integer, at least 3.
    pub fn window_len(&self, grid: &ClassGrid) -> usize {
        let w = self.window_bpm / grid.step();
        let nearest_odd = (((w - 1.0) / 2.0).round() as usize) * 2 + 1;
        nearest_odd.max(3)
    }

    pub fn sigma_len(&self, grid: &ClassGrid) -> f64 {
        self.sigma_bpm / grid.step()
    }

    /// Gaussian sampled at integer offsets `-h..=h`, unnormalized.
    pub fn kernel(&self, grid: &ClassGrid) -> Vec<f64> {
        let half = (self.window_len(grid) / 2) as i64;
        let s = self.sigma_len(grid);
        (-half..=half).map(|j| (-((j * j) as f64) / (2.0 * s * s)).exp()).collect()
    }
}

/// Convolve with the sampled Gaussian (zero-extended "same" padding) and
/// rescale so the result sums to one.
pub fn gaussian_smooth_normalize(v: &[f64], spec: &SmoothingSpec, grid: &ClassGrid) -> Result<Vec<f64>> {
    if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidArgument("smoothing input must be finite and nonnegative".into()));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidArgument("cannot normalize an all-zero vector".into()));
    }
    let kernel = spec.kernel(grid);
    let half = (kernel.len() / 2) as i64;
    let n = v.len() as i64;
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            (-half..=half)
                .filter_map(|j| {
                    let src = i + j;
                    (0..n).contains(&src).then(|| v[src as usize] * kernel[(j + half) as usize])
                })
                .sum()
        })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Smoothed inverse-frequency class weights; sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(n: usize) -> Self {
        ClassWeights(vec![1.0 / n as f64; n])
    }

    pub fn get(&self, label: usize) -> f64 {
        self.0[label]
    }
}

/// Inverse class counts (0 for empty classes), then Gaussian smoothing with
/// σ = 13/3 bpm.
pub fn class_weights(labels: &[usize], grid: &ClassGrid) -> Result<ClassWeights> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("class weights need at least one label".into()));
    }
    let mut counts = vec![0usize; grid.n_classes];
    for &l in labels {
        let slot = counts
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} outside the class grid")))?;
        *slot += 1;
    }
    let inverse: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    Ok(ClassWeights(gaussian_smooth_normalize(&inverse, &SmoothingSpec::CLASS_WEIGHTS, grid)?))
}

/// Gaussian-blurred one-hot target (σ = 13/6 bpm); sums to one.
pub fn smoothed_one_hot(label: usize, grid: &ClassGrid) -> Vec<f64> {
    assert!(label < grid.n_classes, "label {label} outside the class grid");
    let mut v = vec![0.0; grid.n_classes];
    v[label] = 1.0;
    gaussian_smooth_normalize(&v, &SmoothingSpec::ONE_HOT, grid).expect("one-hot is nonzero")
}

pub fn se_loss<T: Scalar>(pred: T, target: T) -> T {
    let d = pred - target;
    d * d
}

fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln()
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| (z - lse).exp()).collect()
}

/// `w_y · (logsumexp(Ŷ) − Ŷ_y)` with the max-shift trick.
pub fn ce_loss<T: Scalar>(logits: &[T], label: usize, weights: &ClassWeights) -> T {
    T::from_f64_lossy(weights.get(label)) * (log_sum_exp(logits) - logits[label])
}

/// Mean squared error between `a` and `b`.
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = T::from_usize_lossy(a.len());
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n
}

/// `CE + α·MSE(Ŷ, Ỹ)`, with the MSE on the raw outputs.
pub fn cl_loss<T: Scalar>(logits: &[T], label: usize, weights: &ClassWeights, alpha: f64, grid: &ClassGrid) -> T {
    let target: Vec<T> = smoothed_one_hot(label, grid).into_iter().map(T::from_f64_lossy).collect();
    ce_loss(logits, label, weights) + T::from_f64_lossy(alpha) * mse(logits, &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Se,
    Ce,
    Cl,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Se => "se",
            LossKind::Ce => "ce",
            LossKind::Cl => "cl",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(LossKind::Se),
            "ce" => Ok(LossKind::Ce),
            "cl" => Ok(LossKind::Cl),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected se, ce or cl)"))),
        }
    }
}

/// Per-sample supervision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub hr_bpm: f64,
    pub label: usize,
}

/// Batch objective: mean over samples of the configured loss, together with
/// its gradient with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: LossKind,
    pub alpha: f64,
    /// Apply the MSE term to softmax probabilities instead of raw outputs.
    pub mse_on_softmax: bool,
    pub weights: ClassWeights,
    one_hots: Vec<Vec<f64>>,
}

impl Objective {
    pub fn new(kind: LossKind, alpha: f64, weights: ClassWeights, grid: &ClassGrid) -> Self {
        let one_hots = match kind {
            LossKind::Cl => (0..grid.n_classes).map(|l| smoothed_one_hot(l, grid)).collect(),
            _ => vec![],
        };
        Objective { kind, alpha, mse_on_softmax: false, weights, one_hots }
    }

    pub fn evaluate<T: Scalar>(&self, outputs: &Tensor<T>, targets: &[Target]) -> Result<(T, Tensor<T>)> {
        let b = outputs.batch();
        if targets.len() != b {
            return Err(Error::Shape(format!("{} targets for a batch of {b}", targets.len())));
        }
        let width = outputs.len() / b;
        let expected = if self.kind == LossKind::Se { 1 } else { self.weights.0.len() };
        if outputs.ndim() != 2 || width != expected {
            return Err(Error::Shape(format!(
                "{} loss expects outputs [B,{expected}], got {:?}",
                self.kind.name(),
                outputs.shape()
            )));
        }
        let inv_b = T::one() / T::from_usize_lossy(b);
        let mut grad = Tensor::zeros(outputs.shape());
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let row = outputs.item(i);
            let g = &mut grad.data_mut()[i * width..(i + 1) * width];
            total += match self.kind {
                LossKind::Se => {
                    let y = T::from_f64_lossy(t.hr_bpm);
                    g[0] = (row[0] + row[0] - y - y) * inv_b;
                    se_loss(row[0], y)
                }
                LossKind::Ce => self.ce_term(row, t.label, g, inv_b),
                LossKind::Cl => {
                    let ce = self.ce_term(row, t.label, g, inv_b);
                    ce + self.mse_term(row, t.label, g, inv_b)
                }
            };
        }
        Ok((total * inv_b, grad))
    }

    fn ce_term<T: Scalar>(&self, row: &[T], label: usize, g: &mut [T], scale: T) -> T {
        let w = T::from_f64_lossy(self.weights.get(label));
        for (gi, p) in g.iter_mut().zip(softmax(row)) {
            *gi += w * p * scale;
        }
        g[label] -= w * scale;
        ce_loss(row, label, &self.weights)
    }

    fn mse_term<T: Scalar>(&self, row: &[T], label: usize, g: &mut [T], scale: T) -> T {
        let target: Vec<T> = self.one_hots[label].iter().map(|&v| T::from_f64_lossy(v)).collect();
        let alpha = T::from_f64_lossy(self.alpha);
        let n = T::from_usize_lossy(row.len());
        let two = T::one() + T::one();
        if self.mse_on_softmax {
            let p = softmax(row);
            let v: Vec<T> = p.iter().zip(&target).map(|(&pi, &ti)| alpha * two * (pi - ti) / n).collect();
            let pv: T = p.iter().zip(&v).map(|(&a, &b)| a * b).sum();
            for ((gi, &pi), &vi) in g.iter_mut().zip(&p).zip(&v) {
                *gi += pi * (vi - pv) * scale;
            }
            alpha * mse(&p, &target)
        } else {
            for ((gi, &yi), &ti) in g.iter_mut().zip(row).zip(&target) {
                *gi += alpha * two * (yi - ti) / n * scale;
            }
            alpha * mse(row, &target)
        }
    }
}
