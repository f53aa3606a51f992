//! Adam, the 1cycle schedule, the learning-rate range test and the epoch
//! loop with validation-based model selection.

use std::fmt::Write as _;
use std::ops::Range;

use log::{debug, error, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batch_tensor, SignalSample, SplitSets};
use crate::error::{Error, Result};
use crate::eval::{mae, predict_samples};
use crate::losses::{class_weights, ClassWeights, LossKind, Objective, Target, DEFAULT_ALPHA};
use crate::model::{ClassGrid, Model, ModelSpec, Task};
use crate::nn::{Gradients, Mode};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub with_filter: bool,
    pub alpha: f64,
    pub mse_on_softmax: bool,
    pub augment: bool,
    pub seed: u64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 300,
            loss: LossKind::Cl,
            with_filter: true,
            alpha: DEFAULT_ALPHA,
            mse_on_softmax: false,
            augment: true,
            seed: 0,
            lr_min: 5.8e-5,
            lr_max: 5.8e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 (batch norm), got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.with_filter && self.loss == LossKind::Se {
            return bad("the filtering stack needs a classification loss (ce or cl), not se".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam needs β₁, β₂ in [0, 1) and ε > 0".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and ≥ 0, got {}", self.alpha));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let task = if self.loss == LossKind::Se { Task::Regression } else { Task::Classification };
        ModelSpec { task, with_filter: self.with_filter }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, m: vec![], v: vec![] }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update of every `params[i]` with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Shape("Adam: parameter and gradient shapes differ".into()));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("Adam: gradient".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = c(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (c(lr), c(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step_model(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let g: Vec<&[T]> = grads.tensors().map(|t| t.data()).collect();
        let mut p: Vec<&mut [T]> = model.net.params_mut().collect();
        self.step(&mut p, &g, lr)
    }
}

/// Triangular 1cycle schedule: `lr_min` at step 0, `lr_max` at
/// `total_steps / 2`, back to `lr_min` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_min: f64, lr_max: f64) -> f64 {
    let peak = total_steps / 2;
    if total_steps < 3 || step == 0 {
        return if step == 0 { lr_min } else { lr_max };
    }
    let last = total_steps - 1;
    let frac = if step <= peak {
        step as f64 / peak as f64
    } else {
        (last - step.min(last)) as f64 / (last - peak) as f64
    };
    lr_min + (lr_max - lr_min) * frac
}

/// Contiguous batch ranges over `n` items. A trailing batch of one is folded
/// into the previous batch because train-mode batch norm needs two samples.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n).step_by(batch_size.max(1)).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let tail = out.pop().expect("checked non-empty");
        out.last_mut().expect("more than one batch").end = tail.end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    /// Learning rate of every optimizer step.
    pub lr_trace: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mae,lr\n");
        for e in &self.epochs {
            let val = e.val_mae.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, val, e.lr);
        }
        s
    }
}

pub struct TrainOutcome<T> {
    pub log: TrainLog,
    /// Model with the lowest validation MAE (the final model when there is
    /// no validation set).
    pub best: Model<T>,
    pub last: Model<T>,
}

fn targets(samples: &[&SignalSample]) -> Vec<Target> {
    samples.iter().map(|s| Target { hr_bpm: s.ref_hr_bpm, label: s.label }).collect()
}

/// Class weights from the training labels only.
pub fn build_objective(config: &TrainConfig, train: &[SignalSample], grid: &ClassGrid) -> Result<Objective> {
    let weights = match config.loss {
        LossKind::Se => ClassWeights::uniform(grid.n_classes),
        _ => class_weights(&train.iter().map(|s| s.label).collect::<Vec<_>>(), grid)?,
    };
    let mut objective = Objective::new(config.loss, config.alpha, weights, grid);
    objective.mse_on_softmax = config.mse_on_softmax;
    Ok(objective)
}

/// Fresh model for `config`. A regression head starts its output batch
/// norm shift at the mean training HR so the bpm-valued output does not
/// have to climb from zero.
pub fn init_model<T: Scalar>(config: &TrainConfig, train: &[SignalSample]) -> Result<Model<T>> {
    let mut model = Model::<T>::build(config.model_spec(), config.seed)?;
    if model.spec.task == Task::Regression && !train.is_empty() {
        let mean = train.iter().map(|s| s.ref_hr_bpm).sum::<f64>() / train.len() as f64;
        let (_, head) = model.net.states_mut().last().expect("model has parameters");
        head.bias_mut()[0] = T::from_f64_lossy(mean);
    }
    Ok(model)
}

struct EpochStats {
    loss: f64,
    aborted: bool,
}

/// One pass over the shuffled training set.
fn run_epoch<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    objective: &Objective,
    train: &[SignalSample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut lr_for_step: impl FnMut() -> f64,
) -> EpochStats {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut seen = 0usize;
    for range in batch_ranges(order.len(), config.batch_size) {
        let batch: Vec<&SignalSample> = order[range].iter().map(|&i| &train[i]).collect();
        let windows: Vec<Vec<f64>> = batch
            .iter()
            .map(|s| if config.augment { augment(&s.window, rng) } else { s.window.clone() })
            .collect();
        let lr = lr_for_step();
        let mut step = || -> Result<f64> {
            let views: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
            let (out, tape) = model.forward(batch_tensor(&views)?, Mode::Train, rng)?;
            let (loss, grad) = objective.evaluate(&out, &targets(&batch))?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("batch loss {loss}")));
            }
            let grads = model.backward(&tape, grad)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            model.net.commit_running_stats(&tape);
            adam.step_model(model, &grads, lr)?;
            Ok(loss)
        };
        match step() {
            Ok(loss) => {
                total += loss * batch.len() as f64;
                seen += batch.len();
            }
            Err(e) => {
                error!("aborting epoch at lr {lr:.3e}: {e}");
                return EpochStats { loss: f64::NAN, aborted: true };
            }
        }
    }
    EpochStats { loss: total / seen.max(1) as f64, aborted: false }
}

pub fn validation_mae<T: Scalar>(model: &Model<T>, samples: &[SignalSample], grid: &ClassGrid) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let preds: Vec<f64> = predict_samples(model, samples, grid)?.iter().map(|p| p.hr_bpm).collect();
    let refs: Vec<f64> = samples.iter().map(|s| s.ref_hr_bpm).collect();
    let m = mae(&preds, &refs)?;
    Ok(m.is_finite().then_some(m))
}

/// Trains with 1cycle over `epochs × batches` steps and keeps the model
/// with the lowest validation MAE (first occurrence on ties).
pub fn train_loop<T: Scalar>(config: &TrainConfig, splits: &SplitSets, grid: &ClassGrid) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if splits.train.len() < 2 {
        return Err(Error::Data(format!("need at least 2 training samples, got {}", splits.train.len())));
    }
    if splits.val.is_empty() {
        warn!("empty validation set; the final epoch's model will be kept");
    }
    let objective = build_objective(config, &splits.train, grid)?;
    let mut model = init_model::<T>(config, &splits.train)?;
    let mut adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = batch_ranges(splits.train.len(), config.batch_size).len();
    let total_steps = steps_per_epoch * config.epochs;

    let mut log = TrainLog::default();
    let mut best: Option<Model<T>> = None;
    for epoch in 0..config.epochs {
        let first_step = epoch * steps_per_epoch;
        let mut step = first_step;
        let trace = &mut log.lr_trace;
        let stats = run_epoch(&mut model, &mut adam, &objective, &splits.train, config, &mut rng, || {
            let lr = one_cycle_lr(step, total_steps, config.lr_min, config.lr_max);
            trace.push(lr);
            step += 1;
            lr
        });
        // Keep the trace aligned with the schedule even after an abort.
        for s in step..first_step + steps_per_epoch {
            log.lr_trace.push(one_cycle_lr(s, total_steps, config.lr_min, config.lr_max));
        }
        let val_mae = validation_mae(&model, &splits.val, grid)?;
        if let Some(v) = val_mae {
            if log.best_val_mae.is_none_or(|b| v < b) {
                log.best_val_mae = Some(v);
                log.best_epoch = Some(epoch);
                best = Some(model.clone());
            }
        }
        debug!("epoch {epoch}: loss {:.5} val MAE {val_mae:?}", stats.loss);
        if epoch % 25 == 0 || epoch + 1 == config.epochs {
            info!("epoch {epoch}/{}: train loss {:.5}, val MAE {val_mae:?}", config.epochs, stats.loss);
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            val_mae,
            lr: one_cycle_lr(first_step, total_steps, config.lr_min, config.lr_max),
            aborted: stats.aborted,
        });
    }
    let best = match best {
        Some(b) => b,
        None => {
            log.best_epoch = Some(config.epochs - 1);
            model.clone()
        }
    };
    Ok(TrainOutcome { log, best, last: model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeTestConfig {
    pub lr_lo: f64,
    pub lr_hi: f64,
    pub points_per_decade: usize,
    pub epochs_per_point: usize,
    /// Gaussian smoothing width over log10(lr), in decades.
    pub sigma_decades: f64,
}

impl Default for RangeTestConfig {
    fn default() -> Self {
        RangeTestConfig { lr_lo: 1e-7, lr_hi: 10.0, points_per_decade: 4, epochs_per_point: 5, sigma_decades: 0.5 }
    }
}

impl RangeTestConfig {
    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.lr_lo > 0.0 && self.lr_lo < self.lr_hi && self.points_per_decade > 0) {
            return Err(Error::Config("range test needs 0 < lr_lo < lr_hi and points_per_decade > 0".into()));
        }
        Ok(log_grid(self.lr_lo, self.lr_hi, self.points_per_decade))
    }
}

/// Log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points_per_decade: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    let n = ((b - a) * points_per_decade as f64).round() as usize;
    (0..=n).map(|i| 10f64.powf(a + (b - a) * i as f64 / n.max(1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeTestResult {
    pub lrs: Vec<f64>,
    /// Raw metric per rate; `None` where training diverged.
    pub raw: Vec<Option<f64>>,
    pub smoothed: Vec<Option<f64>>,
    pub lr_min: f64,
    pub lr_max: f64,
    /// The argmin sits on the first or last usable grid point.
    pub at_boundary: bool,
}

impl RangeTestResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lr,metric,smoothed,is_argmin\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, lr) in self.lrs.iter().enumerate() {
            let _ = writeln!(s, "{lr},{},{},{}", opt(self.raw[i]), opt(self.smoothed[i]), *lr == self.lr_max);
        }
        s
    }
}

/// Smooths `metric(lr)` with a Gaussian over log10(lr) and picks
/// `lr_max = argmin`, `lr_min = lr_max / 100`. Diverged points are left out
/// of both the kernel sums and the argmin.
pub fn analyze_range_curve(lrs: &[f64], raw: &[Option<f64>], sigma_decades: f64) -> Result<RangeTestResult> {
    if lrs.len() != raw.len() || lrs.is_empty() {
        return Err(Error::InvalidArgument("range curve needs one metric per rate".into()));
    }
    let logs: Vec<f64> = lrs.iter().map(|l| l.log10()).collect();
    let usable: Vec<usize> = (0..lrs.len()).filter(|&i| raw[i].is_some_and(f64::is_finite)).collect();
    if usable.is_empty() {
        return Err(Error::RangeTest("every probe diverged; try a grid of smaller learning rates".into()));
    }
    let smoothed: Vec<Option<f64>> = (0..lrs.len())
        .map(|i| {
            raw[i].filter(|v| v.is_finite())?;
            let (mut num, mut den) = (0.0, 0.0);
            for &j in &usable {
                let d = (logs[i] - logs[j]) / sigma_decades;
                let k = (-0.5 * d * d).exp();
                num += k * raw[j].expect("usable");
                den += k;
            }
            Some(num / den)
        })
        .collect();
    let mut best = usable[0];
    for &i in &usable {
        if smoothed[i].expect("usable") < smoothed[best].expect("usable") {
            best = i;
        }
    }
    let at_boundary = best == usable[0] || best == *usable.last().expect("non-empty");
    if at_boundary {
        warn!("range-test minimum at the grid edge (lr {:.3e}); widen the grid", lrs[best]);
    }
    Ok(RangeTestResult { lrs: lrs.to_vec(), raw: raw.to_vec(), smoothed, lr_min: lrs[best] / 100.0, lr_max: lrs[best], at_boundary })
}

/// Trains a fresh model at each constant rate for a few epochs and records
/// validation MAE (training MAE when there is no validation set).
pub fn lr_range_test<T: Scalar>(
    config: &TrainConfig,
    range: &RangeTestConfig,
    splits: &SplitSets,
    grid: &ClassGrid,
) -> Result<RangeTestResult> {
    config.validate()?;
    let lrs = range.grid()?;
    let objective = build_objective(config, &splits.train, grid)?;
    let probe_set = if splits.val.is_empty() { &splits.train } else { &splits.val };
    let mut raw = vec![];
    for &lr in &lrs {
        let mut model = init_model::<T>(config, &splits.train)?;
        let mut adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut diverged = false;
        for _ in 0..range.epochs_per_point {
            if run_epoch(&mut model, &mut adam, &objective, &splits.train, config, &mut rng, || lr).aborted {
                diverged = true;
                break;
            }
        }
        let metric = if diverged { None } else { validation_mae(&model, probe_set, grid)? };
        info!("range test lr {lr:.3e}: {metric:?}");
        raw.push(metric);
    }
    analyze_range_curve(&lrs, &raw, range.sigma_decades)
}
