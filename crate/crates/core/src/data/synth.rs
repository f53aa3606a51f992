//! Synthetic color signals standing in for recorded video.
//!
//! Each channel is `baseline + a·pulse(t) + motion(t) + noise`, with
//! `pulse = sin θ + 0.3·sin(2θ + φ)` and `θ` the integrated instantaneous
//! HR. All 18 channels share `θ`; the green channel of each ROI carries the
//! largest amplitude and ROIs differ in how informative they are.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Camera, ColorSignalSequence, Scenario, FPS, N_ROIS};
use crate::error::{Error, Result};
use crate::model::{HR_MAX_BPM, HR_MIN_BPM};

/// Mean power of `sin θ + 0.3·sin(2θ + φ)` per unit amplitude².
const PULSE_POWER: f64 = 0.5 * (1.0 + 0.3 * 0.3);
const COLOR_GAIN: [f64; 3] = [0.45, 1.0, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub duration_s: f64,
    pub hr_min: f64,
    pub hr_max: f64,
    /// Per-channel pulse-to-noise power ratio; `None` means noiseless.
    pub snr_db: Option<f64>,
    /// Amplitude (bpm) of a slow sinusoidal HR drift.
    pub hr_drift_bpm: f64,
    pub drift_period_s: f64,
    /// Add low-frequency motion to mixed-motion sequences.
    pub motion: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sequences: 12,
            duration_s: 60.0,
            hr_min: 50.0,
            hr_max: 110.0,
            snr_db: Some(15.0),
            hr_drift_bpm: 3.0,
            drift_period_s: 40.0,
            motion: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(HR_MIN_BPM..=HR_MAX_BPM).contains(&self.hr_min)
            || !(HR_MIN_BPM..=HR_MAX_BPM).contains(&self.hr_max)
            || self.hr_min > self.hr_max
        {
            return Err(Error::Config(format!(
                "HR range [{}, {}] must lie within [{HR_MIN_BPM}, {HR_MAX_BPM}]",
                self.hr_min, self.hr_max
            )));
        }
        if self.n_sequences == 0 {
            return Err(Error::Config("n_sequences must be positive".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return Err(Error::Config("snr_db must be finite; omit it for noiseless signals".into()));
        }
        if !(self.hr_drift_bpm >= 0.0 && self.drift_period_s > 0.0) {
            return Err(Error::Config("drift amplitude must be ≥ 0 and period > 0".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * FPS).round() as usize
    }
}

/// Cameras cycle Cam1, Cam2, Cam3; scenarios alternate stationary and mixed
/// motion, so 12 sequences cover every (camera, scenario) pair twice.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<ColorSignalSequence>> {
    config.validate()?;
    Ok((0..config.n_sequences).into_par_iter().map(|i| generate_one(config, i)).collect())
}

fn generate_one(config: &SynthConfig, index: usize) -> ColorSignalSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let frames = config.frames();
    let camera = Camera::PHYSICAL[index % 3];
    let scenario = if (index / 3) % 2 == 0 { Scenario::Stationary } else { Scenario::MixedMotion };

    let drift = config.hr_drift_bpm.min((config.hr_max - config.hr_min) / 2.0);
    let base_hr = rng.random_range(config.hr_min + drift..=config.hr_max - drift);
    let drift_phase = rng.random_range(0.0..TAU);
    let ref_hr: Vec<f64> = (0..frames)
        .map(|t| {
            let s = t as f64 / FPS;
            (base_hr + drift * (TAU * s / config.drift_period_s + drift_phase).sin()).clamp(config.hr_min, config.hr_max)
        })
        .collect();
    let mut theta = Vec::with_capacity(frames);
    let mut acc = rng.random_range(0.0..TAU);
    for &hr in &ref_hr {
        theta.push(acc);
        acc += TAU * hr / 60.0 / FPS;
    }
    let harmonic_phase = rng.random_range(0.0..TAU);
    let pulse: Vec<f64> = theta.iter().map(|&th| th.sin() + 0.3 * (2.0 * th + harmonic_phase).sin()).collect();

    // Shared slow motion (< 0.5 Hz, below the admissible HR band).
    let motion: Vec<f64> = if config.motion && scenario == Scenario::MixedMotion {
        let parts: Vec<(f64, f64, f64)> =
            (0..3).map(|_| (rng.random_range(0.05..0.5), rng.random_range(0.0..TAU), rng.random_range(0.2..0.6))).collect();
        (0..frames)
            .map(|t| parts.iter().map(|(f, p, a)| a * (TAU * f * t as f64 / FPS + p).sin()).sum())
            .collect()
    } else {
        vec![0.0; frames]
    };

    let mut signals = Vec::with_capacity(N_ROIS * 3);
    for _roi in 0..N_ROIS {
        let informativeness = rng.random_range(0.3..1.0);
        let motion_gain = rng.random_range(0.5..1.5);
        for gain in COLOR_GAIN {
            let baseline = rng.random_range(60.0..200.0);
            let a = informativeness * gain;
            let noise = config.snr_db.map(|snr| {
                let sigma = (a * a * PULSE_POWER / 10f64.powf(snr / 10.0)).sqrt();
                Normal::new(0.0, sigma).expect("finite sigma")
            });
            let channel = (0..frames)
                .map(|t| {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                    baseline + a * pulse[t] + motion_gain * gain * motion[t] + n
                })
                .collect();
            signals.push(channel);
        }
    }
    ColorSignalSequence { id: format!("syn{index:03}"), camera, scenario, fps: FPS, signals, ref_hr }
}
