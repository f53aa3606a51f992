use pulsegrid::data::{prepare_splits, synth_generate, Camera, Origin, Scenario, SignalSample, SynthConfig};
use pulsegrid::eval::{coverage, evaluate, mae, report_from_predictions, Subset};
use pulsegrid::model::{ClassGrid, ModelSpec, Prediction, Task};
use pulsegrid::Model32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(hr: f64, camera: Camera, scenario: Scenario, grid: &ClassGrid) -> SignalSample {
    SignalSample {
        window: vec![0.0; 18 * 64],
        ref_hr_bpm: hr,
        label: grid.label_of(hr).unwrap(),
        origin: Origin { sequence: "s".into(), start: 0 },
        camera,
        scenario,
    }
}

#[test]
fn metrics_match_naive_loops() {
    let grid = ClassGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let preds: Vec<f64> = (0..1000).map(|_| rng.random_range(40.0..=125.0)).collect();
    let refs: Vec<f64> = (0..1000).map(|_| rng.random_range(40.0..=125.0)).collect();

    let mut abs = 0.0;
    let (mut reg_hits, mut cls_hits) = (0, 0);
    for i in 0..1000 {
        let d = preds[i] - refs[i];
        abs += if d < 0.0 { -d } else { d };
        if d.abs() < 3.0 {
            reg_hits += 1;
        }
        let lp = (((preds[i] - 40.0) / (85.0 / 128.0)).floor() as i64).min(127);
        let lr = (((refs[i] - 40.0) / (85.0 / 128.0)).floor() as i64).min(127);
        if (lp - lr).abs() <= 4 {
            cls_hits += 1;
        }
    }
    assert!((mae(&preds, &refs).unwrap() - abs / 1000.0).abs() < 1e-12);
    assert_eq!(coverage(&preds, &refs, Task::Regression, &grid).unwrap(), reg_hits as f64 / 1000.0);
    assert_eq!(coverage(&preds, &refs, Task::Classification, &grid).unwrap(), cls_hits as f64 / 1000.0);
}

#[test]
fn coverage_thresholds_are_exact() {
    let grid = ClassGrid::default();
    // Label 0 vs label 4 is a hit, label 0 vs label 5 is not.
    let (c0, c4, c5) = (grid.hr_of(0), grid.hr_of(4), grid.hr_of(5));
    assert_eq!(coverage(&[c4], &[c0], Task::Classification, &grid).unwrap(), 1.0);
    assert_eq!(coverage(&[c5], &[c0], Task::Classification, &grid).unwrap(), 0.0);
    // Regression: strictly under 3 bpm.
    assert_eq!(coverage(&[72.0], &[75.0], Task::Regression, &grid).unwrap(), 0.0);
    assert_eq!(coverage(&[72.01], &[75.0], Task::Regression, &grid).unwrap(), 1.0);
    assert!(mae(&[], &[]).is_err());
    assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn full_mae_is_the_weighted_combination_of_scenarios() {
    let grid = ClassGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut samples = vec![];
    let mut preds = vec![];
    for i in 0..37 {
        let scenario = if i % 3 == 0 { Scenario::MixedMotion } else { Scenario::Stationary };
        let hr = rng.random_range(50.0..110.0);
        samples.push(sample(hr, Camera::PHYSICAL[i % 3], scenario, &grid));
        preds.push(Prediction { label: None, hr_bpm: hr + rng.random_range(-8.0..8.0) });
    }
    let r = report_from_predictions(Task::Regression, &samples, &preds, &grid).unwrap();
    let (s, m) = (r.row(Subset::Stationary), r.row(Subset::MixedMotion));
    let combined = (s.n_samples as f64 * s.mae_bpm.unwrap() + m.n_samples as f64 * m.mae_bpm.unwrap())
        / (s.n_samples + m.n_samples) as f64;
    assert!((r.full_mae().unwrap() - combined).abs() < 1e-12);
    assert_eq!(r.row(Subset::Full).n_samples, 37);
    let cams: usize = [Subset::Cam1, Subset::Cam2, Subset::Cam3].iter().map(|&c| r.row(c).n_samples).sum();
    assert_eq!(cams, 37);
    assert_eq!(r.pairs.len(), 37);
}

#[test]
fn single_camera_test_set_fills_only_its_rows() {
    let grid = ClassGrid::default();
    let samples: Vec<SignalSample> =
        (0..5).map(|i| sample(60.0 + i as f64, Camera::Cam2, Scenario::Stationary, &grid)).collect();
    let preds: Vec<Prediction> = samples.iter().map(|s| Prediction { label: None, hr_bpm: s.ref_hr_bpm + 1.0 }).collect();
    let r = report_from_predictions(Task::Regression, &samples, &preds, &grid).unwrap();
    for subset in Subset::ALL {
        let row = r.row(subset);
        let populated = matches!(subset, Subset::Cam2 | Subset::Stationary | Subset::Full);
        assert_eq!(row.mae_bpm.is_some(), populated, "{subset:?}");
        assert_eq!(row.n_samples, if populated { 5 } else { 0 });
    }
    assert!(r.to_csv().contains("Cam1,0,,\n"));
}

#[test]
fn evaluation_is_deterministic() {
    let grid = ClassGrid::default();
    let seqs = synth_generate(&SynthConfig { n_sequences: 3, duration_s: 20.0, ..Default::default() }).unwrap();
    let splits = prepare_splits(&seqs, &grid).unwrap();
    let model = Model32::build(ModelSpec::FILTERED, 2).unwrap();
    let a = evaluate(&model, &splits.test, &grid).unwrap();
    let b = evaluate(&model, &splits.test, &grid).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
    assert!(a.pairs.iter().all(|p| grid.contains(p.pred_bpm)));
}
