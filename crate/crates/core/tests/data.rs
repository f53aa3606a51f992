use std::f64::consts::TAU;
use std::fs;

use proptest::prelude::*;
use pulsegrid::data::{
    ingest, prepare_splits, split_indices, synth_generate, window_count, window_sequence, write_dataset, Camera,
    ColorSignalSequence, Scenario, SynthConfig, FPS, MANIFEST_FILE,
};
use pulsegrid::model::{ClassGrid, INPUT_FRAMES, INPUT_ROWS};

fn constant_sequence(id: &str, frames: usize) -> ColorSignalSequence {
    ColorSignalSequence {
        id: id.into(),
        camera: Camera::Cam1,
        scenario: Scenario::Stationary,
        fps: FPS,
        signals: (0..INPUT_ROWS).map(|c| (0..frames).map(|t| (c * 7 + t % 5) as f64 * 0.25).collect()).collect(),
        ref_hr: vec![80.0; frames],
    }
}

/// HR of the strongest DFT bin in the admissible band, scanned at 0.05 bpm.
fn spectral_peak_bpm(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut best = (0.0, f64::NEG_INFINITY);
    let mut bpm = 40.0;
    while bpm <= 125.0 {
        let w = TAU * bpm / 60.0 / FPS;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            re += (v - mean) * (w * t as f64).cos();
            im -= (v - mean) * (w * t as f64).sin();
        }
        let p = re * re + im * im;
        if p > best.1 {
            best = (bpm, p);
        }
        bpm += 0.05;
    }
    best.0
}

#[test]
fn synthetic_spectral_peak_matches_configured_hr() {
    for snr in [20.0, 30.0] {
        let cfg = SynthConfig { n_sequences: 6, snr_db: Some(snr), hr_drift_bpm: 0.0, seed: 11, ..Default::default() };
        for seq in synth_generate(&cfg).unwrap() {
            // Green channels carry the largest amplitude; use the first ROI's.
            let peak = spectral_peak_bpm(&seq.signals[1]);
            assert!((peak - seq.ref_hr[0]).abs() <= 1.0, "{}: peak {peak} vs {}", seq.id, seq.ref_hr[0]);
        }
    }
}

#[test]
fn sixty_bpm_has_a_fifteen_frame_period() {
    let cfg = SynthConfig {
        n_sequences: 1,
        hr_min: 60.0,
        hr_max: 60.0,
        hr_drift_bpm: 0.0,
        snr_db: None,
        motion: false,
        ..Default::default()
    };
    let seq = &synth_generate(&cfg).unwrap()[0];
    let g = &seq.signals[1];
    for t in 0..g.len() - 15 {
        assert!((g[t] - g[t + 15]).abs() < 1e-9);
    }
    assert!((spectral_peak_bpm(g) - 60.0).abs() < 0.1);
}

#[test]
fn dataset_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_sequences: 3, duration_s: 8.0, ..Default::default() };
    let seqs = synth_generate(&cfg).unwrap();
    write_dataset(dir.path(), &seqs).unwrap();
    let report = ingest(dir.path(), &ClassGrid::default()).unwrap();
    assert!(report.rejections.is_empty(), "{:?}", report.rejections);
    assert_eq!(report.sequences, seqs);

    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &synth_generate(&cfg).unwrap()).unwrap();
    for name in [MANIFEST_FILE, "syn000.csv", "syn002.csv"] {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn bad_files_are_rejected_and_the_rest_ingested() {
    let dir = tempfile::tempdir().unwrap();
    let good = constant_sequence("good", 70);
    let mut fast = constant_sequence("fast", 70);
    fast.ref_hr[10] = 130.0;
    let short = constant_sequence("short", 40);
    write_dataset(dir.path(), &[good.clone(), fast, short, constant_sequence("gappy", 70)]).unwrap();

    let gappy = dir.path().join("gappy.csv");
    let text = fs::read_to_string(&gappy).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with("5,")).collect();
    fs::write(&gappy, lines.join("\n")).unwrap();

    let mut manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    manifest.push_str("ghost,Cam2,stationary,15,ghost.csv\n");
    manifest.push_str("nocol,Cam2,stationary,15,nocol.csv\n");
    fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
    fs::write(dir.path().join("nocol.csv"), "frame_index,roi1_r\n0,1.0\n").unwrap();

    let report = ingest(dir.path(), &ClassGrid::default()).unwrap();
    assert_eq!(report.sequences, vec![good]);
    let reason = |f: &str| report.rejections.iter().find(|r| r.file == f).map(|r| r.reason.clone()).unwrap();
    assert_eq!(reason("fast.csv"), "HR out of admissible range");
    assert!(reason("short.csv").contains("fewer than one"));
    assert!(reason("gappy.csv").contains("non-contiguous"));
    assert!(reason("ghost.csv").contains("file not found"));
    assert!(reason("nocol.csv").contains("missing column `roi1_g`"));
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ingest(dir.path(), &ClassGrid::default()).is_err());
}

#[test]
fn windows_carry_consistent_labels_and_bounds() {
    let grid = ClassGrid::default();
    let cfg = SynthConfig { n_sequences: 2, duration_s: 20.0, ..Default::default() };
    for seq in synth_generate(&cfg).unwrap() {
        for s in window_sequence(&seq, &grid).unwrap() {
            assert_eq!(s.label, grid.label_of(s.ref_hr_bpm).unwrap());
            for row in s.window.chunks(INPUT_FRAMES) {
                assert_eq!(row.iter().copied().fold(f64::INFINITY, f64::min), -1.0);
                assert_eq!(row.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn window_count_formula(frames in 64usize..3000) {
        let seq = constant_sequence("p", frames);
        let windows = window_sequence(&seq, &ClassGrid::default()).unwrap();
        prop_assert_eq!(windows.len(), (frames - 64) / 10 + 1);
        prop_assert_eq!(windows.len(), window_count(frames));
        prop_assert!(windows.iter().all(|w| w.origin.start + 64 <= frames));
    }

    #[test]
    fn splits_never_share_frames_with_training(frames in 64usize..3000) {
        let seq = constant_sequence("p", frames);
        let sets = prepare_splits(&[seq], &ClassGrid::default()).unwrap();
        let train_end = sets.train.iter().map(|s| s.origin.frames().end).max().unwrap();
        for s in sets.val.iter().chain(&sets.test) {
            for t in &sets.train {
                let (a, b) = (s.origin.frames(), t.origin.frames());
                prop_assert!(a.end <= b.start || b.end <= a.start);
            }
            prop_assert!(s.origin.start >= train_end);
        }
        let n = window_count(frames);
        let idx = split_indices(n);
        prop_assert_eq!(sets.train.len() + sets.val.len() + sets.test.len(),
            idx.train.len() + idx.val.len() + idx.test.len());
        if n >= 10 {
            prop_assert_eq!(sets.train.len(), n * 7 / 10);
            prop_assert!(sets.val.len() <= n / 10);
        }
    }
}
