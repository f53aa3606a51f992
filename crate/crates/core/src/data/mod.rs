//! Color-signal sequences and the 18×64 samples cut from them.
//!
//! A sequence holds 18 channels (6 ROIs × RGB, ROI-major) sampled at
//! 15 fps plus a per-frame reference HR. Samples are 64-frame windows taken
//! every 10 frames, min-max scaled per channel to [−1, 1].

mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassGrid, INPUT_FRAMES, INPUT_ROWS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{ingest, write_dataset, IngestReport, Rejection, MANIFEST_FILE};
pub use synth::{synth_generate, SynthConfig};

pub const FPS: f64 = 15.0;
pub const N_ROIS: usize = 6;
pub const WINDOW_STEP: usize = 10;
pub const AUGMENT_AMPLITUDE: (f64, f64) = (5e-3, 5e-2);

/// Fewer windows than this and the whole sequence goes to training.
pub const MIN_SPLIT_WINDOWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Camera {
    Cam1,
    Cam2,
    Cam3,
    Synthetic,
}

impl Camera {
    pub const PHYSICAL: [Camera; 3] = [Camera::Cam1, Camera::Cam2, Camera::Cam3];

    pub fn name(&self) -> &'static str {
        match self {
            Camera::Cam1 => "Cam1",
            Camera::Cam2 => "Cam2",
            Camera::Cam3 => "Cam3",
            Camera::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Camera {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cam1" | "1" => Ok(Camera::Cam1),
            "cam2" | "2" => Ok(Camera::Cam2),
            "cam3" | "3" => Ok(Camera::Cam3),
            "synthetic" => Ok(Camera::Synthetic),
            other => Err(Error::InvalidArgument(format!("unknown camera `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    Stationary,
    MixedMotion,
    Synthetic,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Stationary => "stationary",
            Scenario::MixedMotion => "mixed_motion",
            Scenario::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stationary" => Ok(Scenario::Stationary),
            "mixed_motion" | "mixedmotion" | "mixed" => Ok(Scenario::MixedMotion),
            "synthetic" => Ok(Scenario::Synthetic),
            other => Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorSignalSequence {
    pub id: String,
    pub camera: Camera,
    pub scenario: Scenario,
    pub fps: f64,
    /// `INPUT_ROWS` channels of `frames()` values each.
    pub signals: Vec<Vec<f64>>,
    pub ref_hr: Vec<f64>,
}

impl ColorSignalSequence {
    pub fn frames(&self) -> usize {
        self.ref_hr.len()
    }

    /// Checks channel count and lengths, fps, finiteness and the HR range.
    /// Sequences shorter than one window are allowed; they yield no samples.
    pub fn validate(&self, grid: &ClassGrid) -> Result<()> {
        if self.signals.len() != INPUT_ROWS {
            return Err(Error::Data(format!("expected {INPUT_ROWS} channels, got {}", self.signals.len())));
        }
        if let Some(c) = self.signals.iter().position(|s| s.len() != self.frames()) {
            return Err(Error::Data(format!(
                "channel {c} has {} frames, reference HR has {}",
                self.signals[c].len(),
                self.frames()
            )));
        }
        if self.fps != FPS {
            return Err(Error::Data(format!("fps must be {FPS}, got {}", self.fps)));
        }
        if self.signals.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite color value".into()));
        }
        if self.ref_hr.iter().any(|&h| !grid.contains(h)) {
            return Err(Error::Data("HR out of admissible range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub sequence: String,
    pub start: usize,
}

impl Origin {
    /// Frame range covered by the window, half-open.
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.start + INPUT_FRAMES
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample {
    /// Row-major 18×64, each row in [−1, 1].
    pub window: Vec<f64>,
    pub ref_hr_bpm: f64,
    pub label: usize,
    pub origin: Origin,
    pub camera: Camera,
    pub scenario: Scenario,
}

/// Number of windows a sequence of `frames` frames yields.
pub fn window_count(frames: usize) -> usize {
    if frames < INPUT_FRAMES {
        0
    } else {
        (frames - INPUT_FRAMES) / WINDOW_STEP + 1
    }
}

pub fn window_sequence(seq: &ColorSignalSequence, grid: &ClassGrid) -> Result<Vec<SignalSample>> {
    let n = window_count(seq.frames());
    if n == 0 {
        warn!("sequence {} has {} frames, fewer than one window", seq.id, seq.frames());
    }
    (0..n)
        .map(|w| {
            let start = w * WINDOW_STEP;
            let frames = start..start + INPUT_FRAMES;
            let mut window = Vec::with_capacity(INPUT_ROWS * INPUT_FRAMES);
            for channel in &seq.signals {
                window.extend_from_slice(&channel[frames.clone()]);
            }
            scale_sample(&mut window);
            let ref_hr_bpm = seq.ref_hr[frames].iter().sum::<f64>() / INPUT_FRAMES as f64;
            Ok(SignalSample {
                window,
                ref_hr_bpm,
                label: grid.label_of(ref_hr_bpm)?,
                origin: Origin { sequence: seq.id.clone(), start },
                camera: seq.camera,
                scenario: seq.scenario,
            })
        })
        .collect()
}

/// Per-channel min-max map to [−1, 1] of a row-major 18×64 window, in
/// place. Constant channels become zeros.
pub fn scale_sample(window: &mut [f64]) {
    for row in window.chunks_mut(INPUT_FRAMES) {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            // Divide rather than multiply by a reciprocal so the extremes
            // land exactly on ±1.
            let range = hi - lo;
            for v in row.iter_mut() {
                *v = (2.0 * ((*v - lo) / range) - 1.0).clamp(-1.0, 1.0);
            }
        } else {
            row.fill(0.0);
        }
    }
}

/// Adds `U[−A, A]` noise with `A ~ U[5e-3, 5e-2]` drawn once per call.
pub fn augment<R: Rng + ?Sized>(window: &[f64], rng: &mut R) -> Vec<f64> {
    let amplitude = rng.random_range(AUGMENT_AMPLITUDE.0..=AUGMENT_AMPLITUDE.1);
    augment_with_amplitude(window, amplitude, rng)
}

pub fn augment_with_amplitude<R: Rng + ?Sized>(window: &[f64], amplitude: f64, rng: &mut R) -> Vec<f64> {
    if amplitude == 0.0 {
        return window.to_vec();
    }
    window.iter().map(|&v| v + rng.random_range(-amplitude..=amplitude)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSets {
    pub train: Vec<SignalSample>,
    pub val: Vec<SignalSample>,
    pub test: Vec<SignalSample>,
}

/// Index sets of one sequence's windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split arithmetic for `n` ordered windows: the first 70% train, the next
/// 10% of `n` validation and the last 20% test. Validation and test windows
/// sharing any frame with a training window are dropped.
pub fn split_indices(n: usize) -> SplitIndices {
    if n < MIN_SPLIT_WINDOWS {
        return SplitIndices { train: (0..n).collect(), val: vec![], test: vec![] };
    }
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let n_test = (n as f64 * 0.2).round() as usize;
    // Last training window covers frames up to (n_train-1)*step + 64.
    let train_end = (n_train - 1) * WINDOW_STEP + INPUT_FRAMES;
    let clear = |&i: &usize| i * WINDOW_STEP >= train_end;
    let val_end = (n_train + n_val).min(n - n_test);
    SplitIndices {
        train: (0..n_train).collect(),
        val: (n_train..val_end).filter(clear).collect(),
        test: (n - n_test..n).filter(clear).collect(),
    }
}

/// Splits every sequence's windows and pools the parts.
pub fn split_sets(per_sequence: Vec<Vec<SignalSample>>) -> SplitSets {
    let mut sets = SplitSets::default();
    for windows in per_sequence {
        if windows.is_empty() {
            continue;
        }
        if windows.len() < MIN_SPLIT_WINDOWS {
            warn!(
                "sequence {} has only {} windows; all assigned to training",
                windows[0].origin.sequence,
                windows.len()
            );
        }
        let idx = split_indices(windows.len());
        let mut slots: Vec<Option<SignalSample>> = windows.into_iter().map(Some).collect();
        let mut take = |ids: &[usize], out: &mut Vec<SignalSample>| {
            out.extend(ids.iter().filter_map(|&i| slots[i].take()));
        };
        take(&idx.train, &mut sets.train);
        take(&idx.val, &mut sets.val);
        take(&idx.test, &mut sets.test);
    }
    sets
}

/// Which sequences feed training and validation. Test sets are never
/// filtered, so cross-camera generalization can be measured.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub train_cameras: Option<Vec<Camera>>,
    pub scenario: Option<Scenario>,
}

impl SplitPolicy {
    pub fn admits(&self, camera: Camera, scenario: Scenario) -> bool {
        self.train_cameras.as_ref().is_none_or(|c| c.contains(&camera))
            && self.scenario.is_none_or(|s| s == scenario)
    }
}

impl SplitSets {
    pub fn restrict_training(mut self, policy: &SplitPolicy) -> SplitSets {
        self.train.retain(|s| policy.admits(s.camera, s.scenario));
        self.val.retain(|s| policy.admits(s.camera, s.scenario));
        self
    }
}

/// Windows every sequence, splits per sequence and pools.
pub fn prepare_splits(sequences: &[ColorSignalSequence], grid: &ClassGrid) -> Result<SplitSets> {
    let per_sequence = sequences.iter().map(|s| window_sequence(s, grid)).collect::<Result<Vec<_>>>()?;
    Ok(split_sets(per_sequence))
}

/// Stacks windows into a `[B, 1, 18, 64]` tensor.
pub fn batch_tensor<T: Scalar>(windows: &[&[f64]]) -> Result<Tensor<T>> {
    let len = INPUT_ROWS * INPUT_FRAMES;
    if let Some(bad) = windows.iter().find(|w| w.len() != len) {
        return Err(Error::Shape(format!("window has {} values, expected {len}", bad.len())));
    }
    let data = windows.iter().flat_map(|w| w.iter().map(|&v| T::from_f64_lossy(v))).collect();
    Tensor::new(&[windows.len(), 1, INPUT_ROWS, INPUT_FRAMES], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(frames: usize) -> ColorSignalSequence {
        ColorSignalSequence {
            id: "s".into(),
            camera: Camera::Cam2,
            scenario: Scenario::Stationary,
            fps: FPS,
            signals: (0..INPUT_ROWS).map(|c| (0..frames).map(|t| ((t * (c + 1)) as f64 * 0.1).sin()).collect()).collect(),
            ref_hr: vec![72.0; frames],
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(900), 84);
        assert_eq!(window_count(64), 1);
        assert_eq!(window_count(63), 0);
        let grid = ClassGrid::default();
        let w = window_sequence(&seq(900), &grid).unwrap();
        assert_eq!(w.len(), 84);
        assert_eq!(w.last().unwrap().origin.start, 830);
        assert!(window_sequence(&seq(63), &grid).unwrap().is_empty());
    }

    #[test]
    fn window_reference_is_the_mean() {
        let grid = ClassGrid::default();
        let mut s = seq(80);
        s.ref_hr = (0..80).map(|t| 60.0 + t as f64).collect();
        let w = window_sequence(&s, &grid).unwrap();
        assert_eq!(w.len(), 2);
        assert!((w[0].ref_hr_bpm - 91.5).abs() < 1e-12);
        assert!((w[1].ref_hr_bpm - 101.5).abs() < 1e-12);
        assert_eq!(w[1].label, grid.label_of(101.5).unwrap());
    }

    #[test]
    fn scaling_rules() {
        let mut w = vec![0.0; INPUT_ROWS * INPUT_FRAMES];
        for (i, v) in w[..INPUT_FRAMES].iter_mut().enumerate() {
            *v = 2.0 + 2.0 * i as f64;
        }
        w[INPUT_FRAMES..2 * INPUT_FRAMES].fill(3.5);
        scale_sample(&mut w);
        assert_eq!(w[0], -1.0);
        assert_eq!(w[INPUT_FRAMES - 1], 1.0);
        assert!(w[INPUT_FRAMES..2 * INPUT_FRAMES].iter().all(|&v| v == 0.0));
        let before = w.clone();
        scale_sample(&mut w);
        for (a, b) in before.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn split_arithmetic() {
        let s = split_indices(84);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (58, 2, 17));
        assert_eq!(s.val, vec![64, 65]);
        assert_eq!(s.test, (67..84).collect::<Vec<_>>());
        // The two trailing windows still overlap the last training window.
        let s = split_indices(10);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 0, 0));
        let s = split_indices(9);
        assert_eq!(s.train.len(), 9);
    }

    #[test]
    fn augmentation_amplitude_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(augment_with_amplitude(&w, 0.0, &mut rng), w);
        let a = augment(&w, &mut ChaCha8Rng::seed_from_u64(1));
        let b = augment(&w, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(a, b);
        assert!(a.iter().zip(&w).all(|(x, y)| (x - y).abs() <= 5e-2));
    }

    #[test]
    fn augmentation_noise_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zeros = vec![0.0; 100_000];
        let noisy = augment_with_amplitude(&zeros, 0.02, &mut rng);
        let var = noisy.iter().map(|v| v * v).sum::<f64>() / noisy.len() as f64;
        let expected = 0.02 / 3f64.sqrt();
        assert!((var.sqrt() - expected).abs() < 0.03 * expected);
    }

    #[test]
    fn policy_filters_training_only() {
        let grid = ClassGrid::default();
        let mut a = seq(300);
        a.id = "a".into();
        let mut b = seq(300);
        b.id = "b".into();
        b.camera = Camera::Cam3;
        let sets = prepare_splits(&[a, b], &grid).unwrap();
        let policy = SplitPolicy { train_cameras: Some(vec![Camera::Cam3]), scenario: None };
        let restricted = sets.clone().restrict_training(&policy);
        assert!(restricted.train.iter().all(|s| s.camera == Camera::Cam3));
        assert_eq!(restricted.train.len(), sets.train.len() / 2);
        assert_eq!(restricted.test.len(), sets.test.len());
    }

    #[test]
    fn batch_tensor_shape() {
        let w = vec![0.5; INPUT_ROWS * INPUT_FRAMES];
        let t = batch_tensor::<f32>(&[&w, &w, &w]).unwrap();
        assert_eq!(t.shape(), &[3, 1, INPUT_ROWS, INPUT_FRAMES]);
        assert!(batch_tensor::<f32>(&[&w[1..]]).is_err());
    }
}
