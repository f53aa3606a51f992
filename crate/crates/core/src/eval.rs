//! MAE and coverage metrics, per-subset reports and the cross-camera
//! generalization matrix.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, Camera, Scenario, SignalSample, SplitPolicy, SplitSets};
use crate::error::{Error, Result};
use crate::model::{ClassGrid, Model, Prediction, Task};
use crate::scalar::Scalar;
use crate::train::{train_loop, TrainConfig};

/// Regression hits must be strictly closer than this.
pub const COVERAGE_BPM: f64 = 3.0;
/// Classification hits may be off by at most this many labels.
pub const COVERAGE_LABELS: usize = 4;

const EVAL_CHUNK: usize = 256;

fn check_pairs(preds: &[f64], refs: &[f64]) -> Result<()> {
    if preds.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} references", preds.len(), refs.len())));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    Ok(())
}

/// Mean absolute error in bpm.
pub fn mae(preds: &[f64], refs: &[f64]) -> Result<f64> {
    check_pairs(preds, refs)?;
    Ok(preds.iter().zip(refs).map(|(p, r)| (p - r).abs()).sum::<f64>() / preds.len() as f64)
}

/// Fraction of hits: `|ŷ − y| < 3` bpm for regression, `|label(ŷ) − label(y)| ≤ 4`
/// for classification.
pub fn coverage(preds: &[f64], refs: &[f64], task: Task, grid: &ClassGrid) -> Result<f64> {
    check_pairs(preds, refs)?;
    let mut hits = 0usize;
    for (&p, &r) in preds.iter().zip(refs) {
        let hit = match task {
            Task::Regression => (p - r).abs() < COVERAGE_BPM,
            Task::Classification => grid.label_of(p)?.abs_diff(grid.label_of(r)?) <= COVERAGE_LABELS,
        };
        hits += hit as usize;
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Eval-mode predictions for `samples`, in order.
pub fn predict_samples<T: Scalar>(model: &Model<T>, samples: &[SignalSample], grid: &ClassGrid) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let windows: Vec<&[f64]> = chunk.iter().map(|s| s.window.as_slice()).collect();
        out.extend(model.predict(batch_tensor(&windows)?, grid)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Stationary,
    MixedMotion,
    Cam1,
    Cam2,
    Cam3,
    Full,
}

impl Subset {
    pub const ALL: [Subset; 6] =
        [Subset::Stationary, Subset::MixedMotion, Subset::Cam1, Subset::Cam2, Subset::Cam3, Subset::Full];

    pub fn contains(&self, camera: Camera, scenario: Scenario) -> bool {
        match self {
            Subset::Stationary => scenario == Scenario::Stationary,
            Subset::MixedMotion => scenario == Scenario::MixedMotion,
            Subset::Cam1 => camera == Camera::Cam1,
            Subset::Cam2 => camera == Camera::Cam2,
            Subset::Cam3 => camera == Camera::Cam3,
            Subset::Full => true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Subset::Stationary => "Stationary",
            Subset::MixedMotion => "MixedMotion",
            Subset::Cam1 => "Cam1",
            Subset::Cam2 => "Cam2",
            Subset::Cam3 => "Cam3",
            Subset::Full => "Full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subset: Subset,
    pub n_samples: usize,
    pub mae_bpm: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPair {
    pub ref_bpm: f64,
    pub pred_bpm: f64,
    pub camera: Camera,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub rows: Vec<EvalRow>,
    pub pairs: Vec<ScatterPair>,
}

impl EvalReport {
    pub fn row(&self, subset: Subset) -> &EvalRow {
        self.rows.iter().find(|r| r.subset == subset).expect("every subset has a row")
    }

    pub fn full_mae(&self) -> Option<f64> {
        self.row(Subset::Full).mae_bpm
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,n_samples,mae_bpm,coverage\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.subset.name(), r.n_samples, opt(r.mae_bpm), opt(r.coverage));
        }
        s
    }

    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("ref_bpm,pred_bpm,camera,scenario\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{},{}", p.ref_bpm, p.pred_bpm, p.camera, p.scenario);
        }
        s
    }

    /// Writes `report.csv`, `report.json` and `scatter.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))
        };
        put("report.csv", self.to_csv())?;
        put("report.json", serde_json::to_string_pretty(self)?)?;
        put("scatter.csv", self.scatter_csv())
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:>6} {:>9} {:>9}", "subset", "n", "MAE", "coverage")?;
        for r in &self.rows {
            match (r.mae_bpm, r.coverage) {
                (Some(m), Some(c)) => {
                    writeln!(f, "{:<12} {:>6} {:>9.3} {:>8.1}%", r.subset.name(), r.n_samples, m, 100.0 * c)?
                }
                _ => writeln!(f, "{:<12} {:>6} {:>9} {:>9}", r.subset.name(), r.n_samples, "-", "-")?,
            }
        }
        Ok(())
    }
}

/// Per-subset metrics over `samples`; subsets without samples get null
/// metrics.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[SignalSample], grid: &ClassGrid) -> Result<EvalReport> {
    let preds = predict_samples(model, samples, grid)?;
    report_from_predictions(model.spec.task, samples, &preds, grid)
}

pub fn report_from_predictions(
    task: Task,
    samples: &[SignalSample],
    preds: &[Prediction],
    grid: &ClassGrid,
) -> Result<EvalReport> {
    let mut rows = vec![];
    for subset in Subset::ALL {
        let (p, r): (Vec<f64>, Vec<f64>) = samples
            .iter()
            .zip(preds)
            .filter(|(s, _)| subset.contains(s.camera, s.scenario))
            .map(|(s, p)| (p.hr_bpm, s.ref_hr_bpm))
            .unzip();
        let row = if p.is_empty() {
            EvalRow { subset, n_samples: 0, mae_bpm: None, coverage: None }
        } else {
            EvalRow { subset, n_samples: p.len(), mae_bpm: Some(mae(&p, &r)?), coverage: Some(coverage(&p, &r, task, grid)?) }
        };
        rows.push(row);
    }
    let pairs = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| ScatterPair { ref_bpm: s.ref_hr_bpm, pred_bpm: p.hr_bpm, camera: s.camera, scenario: s.scenario })
        .collect();
    Ok(EvalReport { task, rows, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub train_cameras: Vec<Camera>,
    pub train_samples: usize,
    /// Test MAE on Cam1, Cam2, Cam3 and Full.
    pub mae: [Option<f64>; 4],
}

impl MatrixRow {
    pub fn label(&self, model_label: &str) -> String {
        let digits: String = self.train_cameras.iter().map(|c| &c.name()[3..]).collect();
        format!("({model_label}){digits}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationMatrix {
    pub model_label: String,
    pub rows: Vec<MatrixRow>,
}

impl GeneralizationMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_subset,train_samples,Cam1,Cam2,Cam3,Full\n");
        for r in &self.rows {
            let cells: Vec<String> = r.mae.iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()).collect();
            let _ = writeln!(s, "{},{},{}", r.label(&self.model_label), r.train_samples, cells.join(","));
        }
        s
    }
}

/// Trains one model per camera subset ({1}, {2}, {3}, {1,2}, {1,3}, {2,3})
/// and tabulates test MAE per camera. Two-camera training sets are randomly
/// halved so every row trains on a comparable number of samples.
pub fn generalization_matrix(splits: &SplitSets, config: &TrainConfig, grid: &ClassGrid) -> Result<GeneralizationMatrix> {
    let present: BTreeSet<Camera> =
        splits.train.iter().map(|s| s.camera).filter(|c| Camera::PHYSICAL.contains(c)).collect();
    if present.len() < 2 {
        warn!("only {} camera(s) in the training data; the matrix has no cross-camera pairs", present.len());
    }
    let cams: Vec<Camera> = present.into_iter().collect();
    let mut subsets: Vec<Vec<Camera>> = cams.iter().map(|&c| vec![c]).collect();
    for i in 0..cams.len() {
        for j in i + 1..cams.len() {
            subsets.push(vec![cams[i], cams[j]]);
        }
    }
    let spec = config.model_spec();
    let mut rows = vec![];
    for (k, train_cameras) in subsets.into_iter().enumerate() {
        let policy = SplitPolicy { train_cameras: Some(train_cameras.clone()), scenario: None };
        let mut subset = splits.clone().restrict_training(&policy);
        if train_cameras.len() == 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000 ^ k as u64);
            subset.train.shuffle(&mut rng);
            subset.train.truncate(subset.train.len() / 2);
            subset.val.shuffle(&mut rng);
            subset.val.truncate(subset.val.len().div_ceil(2));
        }
        info!("matrix row {:?}: {} training samples", train_cameras, subset.train.len());
        let outcome = train_loop::<f32>(config, &subset, grid)?;
        let report = evaluate(&outcome.best, &subset.test, grid)?;
        let mae = [Subset::Cam1, Subset::Cam2, Subset::Cam3, Subset::Full].map(|s| report.row(s).mae_bpm);
        rows.push(MatrixRow { train_cameras, train_samples: subset.train.len(), mae });
    }
    Ok(GeneralizationMatrix { model_label: spec.label().to_string(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        let refs = [60.0, 70.0, 80.0];
        assert_eq!(mae(&refs, &refs).unwrap(), 0.0);
        let shifted: Vec<f64> = refs.iter().map(|r| r + 3.0).collect();
        assert_eq!(mae(&shifted, &refs).unwrap(), 3.0);
        assert_eq!(mae(&[61.0, 68.0, 83.0], &refs).unwrap(), 2.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn coverage_thresholds() {
        let g = ClassGrid::default();
        let refs = [60.0, 70.0];
        assert_eq!(coverage(&refs, &refs, Task::Regression, &g).unwrap(), 1.0);
        // Strict inequality at exactly 3 bpm.
        assert_eq!(coverage(&[63.0, 72.999], &refs, Task::Regression, &g).unwrap(), 0.5);
        let r = [g.hr_of(50), g.hr_of(80)];
        let off4 = [g.hr_of(54), g.hr_of(76)];
        let off5 = [g.hr_of(55), g.hr_of(75)];
        assert_eq!(coverage(&off4, &r, Task::Classification, &g).unwrap(), 1.0);
        assert_eq!(coverage(&off5, &r, Task::Classification, &g).unwrap(), 0.0);
    }

    #[test]
    fn matrix_labels() {
        let row = MatrixRow { train_cameras: vec![Camera::Cam1, Camera::Cam3], train_samples: 0, mae: [None; 4] };
        assert_eq!(row.label("CL+F"), "(CL+F)13");
    }
}
