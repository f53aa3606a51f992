//! Ready-made gradient-check targets for each layer, each loss and the whole
//! network, all in 64-bit.
//!
//! Layer targets use the scalar objective `Σ r ⊙ layer(x)` for a fixed random
//! projection `r`, so the analytic gradient is the layer's backward pass fed
//! with `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{Objective, Target};
use crate::losses::{class_weights, LossKind};
use crate::model::{ClassGrid, Model, ModelSpec};
use crate::nn::gradcheck::{grad_check, Evaluation, FnCheck, GradCheckOptions, GradCheckable};
use crate::nn::{self, Mode};
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).expect("group sizes follow shapes")
}

/// Boxed target, so callers can iterate over heterogeneous checks.
pub type BoxedCheck = Box<dyn GradCheckable>;

fn fn_check(
    groups: Vec<(&str, Tensor<f64>)>,
    objective: impl FnMut(&[Vec<f64>]) -> f64 + 'static,
    gradient: impl FnMut(&[Vec<f64>]) -> Vec<Vec<f64>> + 'static,
) -> BoxedCheck {
    Box::new(FnCheck {
        groups: groups.into_iter().map(|(n, t)| (n.to_string(), t.into_data())).collect(),
        objective,
        gradient,
    })
}

pub fn conv2d_check(input: &[usize], cout: usize, kernel: (usize, usize), seed: u64) -> BoxedCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [b, cin, h, w] = input.try_into().expect("4-D input shape");
    let (kh, kw) = kernel;
    let xs = [b, cin, h, w];
    let ws = [cout, cin, kh, kw];
    let x = random_tensor(&xs, &mut rng);
    let wt = random_tensor(&ws, &mut rng);
    let bias = random_tensor(&[cout], &mut rng);
    let r = random_tensor(&[b, cout, h - kh + 1, w - kw + 1], &mut rng);
    let r2 = r.clone();
    fn_check(
        vec![("input", x), ("weight", wt), ("bias", bias)],
        move |v| {
            let y = nn::conv2d_forward(&t(&xs, &v[0]), &t(&ws, &v[1]), &t(&[cout], &v[2])).unwrap();
            dot(y.data(), r.data())
        },
        move |v| {
            let g = nn::conv2d_backward(&t(&xs, &v[0]), &t(&ws, &v[1]), &r2, true).unwrap();
            vec![g.input.unwrap().into_data(), g.weight.into_data(), g.bias.into_data()]
        },
    )
}

pub fn conv1d_check(input: &[usize], cout: usize, k: usize, seed: u64) -> BoxedCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [b, cin, l] = input.try_into().expect("3-D input shape");
    let xs = [b, cin, l];
    let ws = [cout, cin, k];
    let x = random_tensor(&xs, &mut rng);
    let wt = random_tensor(&ws, &mut rng);
    let bias = random_tensor(&[cout], &mut rng);
    let r = random_tensor(&[b, cout, l - k + 1], &mut rng);
    let r2 = r.clone();
    fn_check(
        vec![("input", x), ("weight", wt), ("bias", bias)],
        move |v| {
            let y = nn::conv1d_forward(&t(&xs, &v[0]), &t(&ws, &v[1]), &t(&[cout], &v[2])).unwrap();
            dot(y.data(), r.data())
        },
        move |v| {
            let g = nn::conv1d_backward(&t(&xs, &v[0]), &t(&ws, &v[1]), &r2, true).unwrap();
            vec![g.input.unwrap().into_data(), g.weight.into_data(), g.bias.into_data()]
        },
    )
}

pub fn linear_check(batch: usize, fan_in: usize, fan_out: usize, seed: u64) -> BoxedCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = [batch, fan_in];
    let ws = [fan_out, fan_in];
    let x = random_tensor(&xs, &mut rng);
    let wt = random_tensor(&ws, &mut rng);
    let bias = random_tensor(&[fan_out], &mut rng);
    let r = random_tensor(&[batch, fan_out], &mut rng);
    let r2 = r.clone();
    fn_check(
        vec![("input", x), ("weight", wt), ("bias", bias)],
        move |v| {
            let y = nn::linear_forward(&t(&xs, &v[0]), &t(&ws, &v[1]), &t(&[fan_out], &v[2])).unwrap();
            dot(y.data(), r.data())
        },
        move |v| {
            let g = nn::linear_backward(&t(&xs, &v[0]), &t(&ws, &v[1]), &r2).unwrap();
            vec![g.input.into_data(), g.weight.into_data(), g.bias.into_data()]
        },
    )
}

/// Batch norm over axis 1 of `input` (train mode unless `mode` says otherwise).
pub fn batchnorm_check(input: &[usize], mode: Mode, seed: u64) -> BoxedCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = input.to_vec();
    let c = xs[1];
    let x = random_tensor(&xs, &mut rng).map(|v| 2.0 * v + 0.5);
    let gamma = random_tensor(&[c], &mut rng).map(|v| v + 1.5);
    let beta = random_tensor(&[c], &mut rng);
    let rm = random_tensor(&[c], &mut rng);
    let rv = random_tensor(&[c], &mut rng).map(|v| v.abs() + 0.5);
    let r = random_tensor(&xs, &mut rng);
    let (xs2, rm2, rv2, r2) = (xs.clone(), rm.clone(), rv.clone(), r.clone());
    fn_check(
        vec![("input", x), ("gamma", gamma), ("beta", beta)],
        move |v| {
            let (y, _) = nn::batchnorm_forward("bn", &t(&xs, &v[0]), &t(&[c], &v[1]), &t(&[c], &v[2]), &rm, &rv, mode)
                .unwrap();
            dot(y.data(), r.data())
        },
        move |v| {
            let gamma = t(&[c], &v[1]);
            let (_, cache) =
                nn::batchnorm_forward("bn", &t(&xs2, &v[0]), &gamma, &t(&[c], &v[2]), &rm2, &rv2, mode).unwrap();
            let g = nn::batchnorm_backward(&gamma, &cache, &r2).unwrap();
            vec![g.input.into_data(), g.gamma.into_data(), g.beta.into_data()]
        },
    )
}

/// Step that keeps [`relu_check`] arithmetic exact.
pub const RELU_CHECK_EPS: f64 = 1.0 / 131_072.0;

/// ReLU on inputs kept at least `margin` away from the kink.
///
/// Inputs and projection weights are multiples of 2⁻¹⁰, so with a
/// power-of-two step such as [`RELU_CHECK_EPS`] every probe is computed
/// without rounding and the difference quotient is exact.
pub fn relu_check(len: usize, margin: f64, seed: u64) -> BoxedCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (margin * 1024.0).ceil() as i32;
    let x = Tensor::from_fn(&[len], |_| {
        let m = rng.random_range(lo..1024) as f64 / 1024.0;
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let r = Tensor::from_fn(&[len], |_| rng.random_range(-1024..=1024) as f64 / 1024.0);
    let r2 = r.clone();
    fn_check(
        vec![("input", x)],
        move |v| dot(nn::relu_forward(&t(&[len], &v[0])).data(), r.data()),
        move |v| vec![nn::relu_backward(&t(&[len], &v[0]), &r2).unwrap().into_data()],
    )
}

/// Dropout in train mode with a mask fixed by `seed`.
pub fn dropout_check(len: usize, rate: f64, seed: u64) -> BoxedCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[len], &mut rng);
    let r = random_tensor(&[len], &mut rng);
    let r2 = r.clone();
    let mask_seed = seed ^ 0x9e37_79b9;
    fn_check(
        vec![("input", x)],
        move |v| {
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let (y, _) = nn::dropout_forward(&t(&[len], &v[0]), rate, Mode::Train, &mut rng).unwrap();
            dot(y.data(), r.data())
        },
        move |v| {
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let (_, mask) = nn::dropout_forward(&t(&[len], &v[0]), rate, Mode::Train, &mut rng).unwrap();
            vec![nn::dropout_backward(mask.as_deref(), &r2).into_data()]
        },
    )
}

/// Batch objective with respect to the network outputs.
pub fn objective_check(objective: Objective, outputs: Tensor<f64>, targets: Vec<Target>) -> BoxedCheck {
    let shape = outputs.shape().to_vec();
    let (obj2, shape2, targets2) = (objective.clone(), shape.clone(), targets.clone());
    fn_check(
        vec![("outputs", outputs)],
        move |v| objective.evaluate(&t(&shape, &v[0]), &targets).unwrap().0,
        move |v| vec![obj2.evaluate(&t(&shape2, &v[0]), &targets2).unwrap().1.into_data()],
    )
}

/// Loss of the full network on a fixed batch with respect to every
/// learnable tensor. Dropout masks are frozen by reseeding on each pass and
/// the ReLU activation pattern is reported as the branch fingerprint.
pub struct NetworkCheck {
    pub model: Model<f64>,
    pub batch: Tensor<f64>,
    pub targets: Vec<Target>,
    pub objective: Objective,
    pub mode: Mode,
    pub dropout_seed: u64,
}

impl NetworkCheck {
    fn groups_of(&self) -> Vec<(String, usize)> {
        self.model
            .net
            .states()
            .flat_map(|(name, s)| {
                [(format!("{name}.weight"), s.weight().len()), (format!("{name}.bias"), s.bias().len())]
            })
            .collect()
    }

    fn slot(&mut self, group: usize) -> &mut [f64] {
        let layer = group / 2;
        let (_, state) = self.model.net.states_mut().nth(layer).expect("group index in range");
        if group % 2 == 0 {
            state.weight_mut()
        } else {
            state.bias_mut()
        }
    }

    pub fn run(&self) -> Result<(f64, Tensor<f64>, crate::nn::Tape<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (out, tape) = self.model.forward(self.batch.clone(), self.mode, &mut rng)?;
        let (loss, grad) = self.objective.evaluate(&out, &self.targets)?;
        Ok((loss, grad, tape))
    }
}

/// Full-network target on a random 2-sample batch with random targets and
/// non-trivial running statistics.
///
/// Eval mode is the useful setting here: with two samples, train-mode batch
/// norm squeezes upstream gradients down to ~1e-9, below the rounding noise
/// of a central difference on a loss of order 10. Train-mode batch norm is
/// covered by [`batchnorm_check`].
pub fn network_check(spec: ModelSpec, loss: LossKind, mode: Mode, seed: u64) -> Result<NetworkCheck> {
    let grid = ClassGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477);
    let mut model = Model::<f64>::build(spec, seed)?;
    for (_, state) in model.net.states_mut() {
        if let Some(n) = state.running_mean().map(Tensor::len) {
            let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            state.set_running(&mean, &var)?;
        }
    }
    let batch = random_tensor(&[2, 1, crate::model::INPUT_ROWS, crate::model::INPUT_FRAMES], &mut rng);
    let targets = (0..2)
        .map(|_| {
            let hr = rng.random_range(45.0..120.0);
            Ok(Target { hr_bpm: hr, label: grid.label_of(hr)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..crate::model::N_CLASSES)).collect();
    let objective = Objective::new(loss, crate::losses::DEFAULT_ALPHA, class_weights(&labels, &grid)?, &grid);
    Ok(NetworkCheck { model, batch, targets, objective, mode, dropout_seed: seed })
}

impl GradCheckable for NetworkCheck {
    fn groups(&self) -> Vec<(String, usize)> {
        self.groups_of()
    }

    fn get(&self, group: usize, index: usize) -> f64 {
        let (_, state) = self.model.net.states().nth(group / 2).expect("group index in range");
        if group % 2 == 0 {
            state.weight().data()[index]
        } else {
            state.bias().data()[index]
        }
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        self.slot(group)[index] = value;
    }

    fn evaluate(&mut self) -> Evaluation {
        let (value, _, tape) = self.run().expect("network evaluates");
        Evaluation { value, branch: tape.relu_pattern(&self.model.net.layers) }
    }

    fn analytic(&mut self) -> Vec<Vec<f64>> {
        let (_, grad, tape) = self.run().expect("network evaluates");
        let grads = self.model.backward(&tape, grad).expect("backward succeeds");
        grads.tensors().map(|t| t.data().to_vec()).collect()
    }
}

/// One line of the gradient suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub seeds: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst < self.tolerance
    }
}

impl std::fmt::Display for SuiteEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} seeds {:>3} coords {:>6} kinks {:>4} worst {:.2e} (tol {:.0e})",
            self.name, self.seeds, self.checked, self.skipped_kinks, self.worst, self.tolerance
        )
    }
}

fn run_seeds(
    name: &str,
    seeds: u64,
    opts: GradCheckOptions,
    mut make: impl FnMut(u64) -> BoxedCheck,
) -> SuiteEntry {
    let mut entry = SuiteEntry {
        name: name.to_string(),
        tolerance: opts.tolerance,
        seeds: seeds as usize,
        checked: 0,
        skipped_kinks: 0,
        worst: 0.0,
    };
    for seed in 0..seeds {
        let r = grad_check(make(seed).as_mut(), &GradCheckOptions { seed, ..opts });
        entry.checked += r.checked();
        entry.skipped_kinks += r.groups.iter().map(|g| g.skipped_kinks).sum::<usize>();
        entry.worst = entry.worst.max(r.max_rel_error());
    }
    entry
}

fn random_targets(n: usize, rng: &mut impl Rng, grid: &ClassGrid) -> Vec<Target> {
    (0..n)
        .map(|_| {
            let hr = rng.random_range(45.0..120.0);
            Target { hr_bpm: hr, label: grid.label_of(hr).expect("inside the grid") }
        })
        .collect()
}

/// Finite-difference checks of every layer, every loss and the full filtered
/// classification network, each over `seeds` random seeds.
pub fn gradient_suite(seeds: u64, network_coords_per_group: usize) -> Vec<SuiteEntry> {
    let tight = |tolerance| GradCheckOptions { tolerance, ..Default::default() };
    let grid = ClassGrid::default();
    let mut out = vec![
        run_seeds("conv2d", seeds, tight(1e-6), |s| conv2d_check(&[1, 1, 6, 8], 2, (3, 3), s)),
        run_seeds("conv1d", seeds, tight(1e-6), |s| conv1d_check(&[1, 2, 9], 3, 3, s)),
        run_seeds("linear", seeds, tight(1e-8), |s| linear_check(2, 5, 3, s)),
        run_seeds("batchnorm (train)", seeds, tight(1e-6), |s| batchnorm_check(&[8, 4], Mode::Train, s)),
        run_seeds("batchnorm (eval)", seeds, tight(1e-6), |s| batchnorm_check(&[3, 2, 5], Mode::Eval, s)),
        run_seeds("relu", seeds, GradCheckOptions { eps: RELU_CHECK_EPS, ..tight(1e-12) }, |s| {
            relu_check(40, 1e-3, s)
        }),
        run_seeds("dropout", seeds, tight(1e-6), |s| dropout_check(40, 0.5, s)),
    ];
    for kind in [LossKind::Se, LossKind::Ce, LossKind::Cl] {
        let name = format!("{} loss", kind.name());
        out.push(run_seeds(&name, seeds, tight(1e-6), |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let targets = random_targets(3, &mut rng, &grid);
            let width = if kind == LossKind::Se { 1 } else { crate::model::N_CLASSES };
            let outputs = match kind {
                LossKind::Se => Tensor::from_fn(&[3, 1], |_| rng.random_range(40.0..125.0)),
                _ => random_tensor(&[3, width], &mut rng),
            };
            let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..crate::model::N_CLASSES)).collect();
            let weights = class_weights(&labels, &grid).expect("labels in range");
            objective_check(Objective::new(kind, crate::losses::DEFAULT_ALPHA, weights, &grid), outputs, targets)
        }));
    }
    let net = GradCheckOptions { tolerance: 1e-4, max_per_group: Some(network_coords_per_group), ..Default::default() };
    out.push(run_seeds("network (CL+F)", seeds, net, |s| {
        Box::new(network_check(ModelSpec::FILTERED, LossKind::Cl, Mode::Eval, s).expect("network builds"))
    }));
    out
}
