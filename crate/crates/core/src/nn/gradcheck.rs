//! Central finite-difference gradient checking.
//!
//! A [`GradCheckable`] exposes named groups of `f64` coordinates, a scalar
//! objective and its analytic gradient. [`grad_check`] perturbs each
//! selected coordinate by ±ε and compares `(f(x+ε) - f(x-ε)) / 2ε` to the
//! analytic value.
//!
//! Objectives through ReLU networks are only piecewise smooth. An objective
//! may report a `branch` fingerprint (e.g. the ReLU activation pattern);
//! when the two probes of a coordinate land on different branches the
//! difference quotient straddles a kink and that coordinate is counted as
//! skipped instead of compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub branch: u64,
}

impl From<f64> for Evaluation {
    fn from(value: f64) -> Self {
        Evaluation { value, branch: 0 }
    }
}

pub trait GradCheckable {
    /// `(name, len)` of every coordinate group.
    fn groups(&self) -> Vec<(String, usize)>;
    fn get(&self, group: usize, index: usize) -> f64;
    fn set(&mut self, group: usize, index: usize, value: f64);
    fn evaluate(&mut self) -> Evaluation;
    /// Analytic gradient at the current point, one vector per group.
    fn analytic(&mut self) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor: relative error is `|a-n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per group.
    pub max_per_group: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, tolerance: 1e-6, floor: 1e-8, max_per_group: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<24} checked {:>5} skipped {:>3} max rel err {:.3e}",
                g.name, g.checked, g.skipped_kinks, g.max_rel_error
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

pub fn grad_check<C: GradCheckable + ?Sized>(target: &mut C, opts: &GradCheckOptions) -> GradCheckReport {
    let analytic = target.analytic();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = vec![];
    for (gi, (name, len)) in target.groups().into_iter().enumerate() {
        let coords: Vec<usize> = match opts.max_per_group {
            Some(k) if k < len => {
                let mut picked = sample(&mut rng, len, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        let mut report =
            GroupReport { name, checked: 0, skipped_kinks: 0, max_rel_error: 0.0, worst_index: None };
        for idx in coords {
            let x0 = target.get(gi, idx);
            target.set(gi, idx, x0 + opts.eps);
            let plus = target.evaluate();
            target.set(gi, idx, x0 - opts.eps);
            let minus = target.evaluate();
            target.set(gi, idx, x0);
            if plus.branch != minus.branch {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * opts.eps);
            let err = relative_error(analytic[gi][idx], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_index = Some(idx);
            }
        }
        groups.push(report);
    }
    GradCheckReport { groups, tolerance: opts.tolerance }
}

/// Adapter for objectives over plain coordinate vectors.
pub struct FnCheck<F, G> {
    pub groups: Vec<(String, Vec<f64>)>,
    pub objective: F,
    pub gradient: G,
}

impl<F, G> GradCheckable for FnCheck<F, G>
where
    F: FnMut(&[Vec<f64>]) -> f64,
    G: FnMut(&[Vec<f64>]) -> Vec<Vec<f64>>,
{
    fn groups(&self) -> Vec<(String, usize)> {
        self.groups.iter().map(|(n, v)| (n.clone(), v.len())).collect()
    }

    fn get(&self, group: usize, index: usize) -> f64 {
        self.groups[group].1[index]
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        self.groups[group].1[index] = value;
    }

    fn evaluate(&mut self) -> Evaluation {
        let values: Vec<Vec<f64>> = self.groups.iter().map(|(_, v)| v.clone()).collect();
        (self.objective)(&values).into()
    }

    fn analytic(&mut self) -> Vec<Vec<f64>> {
        let values: Vec<Vec<f64>> = self.groups.iter().map(|(_, v)| v.clone()).collect();
        (self.gradient)(&values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut c = FnCheck {
            groups: vec![("x".into(), vec![1.0, -2.0, 3.0])],
            objective: |_: &[Vec<f64>]| 4.2,
            gradient: |v: &[Vec<f64>]| vec![vec![0.0; v[0].len()]],
        };
        let r = grad_check(&mut c, &GradCheckOptions::default());
        assert!(r.passed());
        assert_eq!(r.max_rel_error(), 0.0);
        assert_eq!(r.checked(), 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut c = FnCheck {
            groups: vec![("x".into(), vec![1.0, 2.0])],
            objective: |v: &[Vec<f64>]| v[0].iter().map(|x| x * x).sum(),
            gradient: |v: &[Vec<f64>]| vec![v[0].iter().map(|x| 3.0 * x).collect()],
        };
        let r = grad_check(&mut c, &GradCheckOptions::default());
        assert!(!r.passed());
        assert!((r.max_rel_error() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_passes_tightly() {
        let mut c = FnCheck {
            groups: vec![("a".into(), vec![0.3, -1.7]), ("b".into(), vec![2.5])],
            objective: |v: &[Vec<f64>]| v[0][0] * v[0][1] + v[1][0].powi(3),
            gradient: |v: &[Vec<f64>]| vec![vec![v[0][1], v[0][0]], vec![3.0 * v[1][0].powi(2)]],
        };
        let r = grad_check(&mut c, &GradCheckOptions { tolerance: 1e-8, ..Default::default() });
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn subsampling_limits_checked_coordinates() {
        let mut c = FnCheck {
            groups: vec![("x".into(), vec![1.0; 50])],
            objective: |v: &[Vec<f64>]| v[0].iter().sum(),
            gradient: |v: &[Vec<f64>]| vec![vec![1.0; v[0].len()]],
        };
        let r = grad_check(&mut c, &GradCheckOptions { max_per_group: Some(7), ..Default::default() });
        assert_eq!(r.checked(), 7);
    }
}
