//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p pulsegrid --test acceptance -- 3 7` runs only criteria 3
//! and 7. Criterion 10 is informational and needs `PULSEGRID_REFERENCE_DATA`
//! pointing at an ingestible dataset directory.

use std::time::{Duration, Instant};

use pulsegrid::check::gradient_suite;
use pulsegrid::data::{prepare_splits, synth_generate, window_sequence, SplitSets, SynthConfig, ingest};
use pulsegrid::eval::{coverage, evaluate, mae};
use pulsegrid::losses::{
    ce_loss, cl_loss, class_weights, mse, smoothed_one_hot, LossKind,
};
use pulsegrid::model::{ClassGrid, Model, ModelSpec, Task};
use pulsegrid::nn::Mode;
use pulsegrid::train::{analyze_range_curve, log_grid, one_cycle_lr, train_loop, TrainConfig};
use pulsegrid::{Model64, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const IDENTITY_TOL: f64 = 1e-10;
const SUM_TOL: f64 = 1e-9;
const OVERFIT_COVERAGE: f64 = 0.95;
const OVERFIT_MAE: f64 = 1.4;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const E2E_MAE: f64 = 5.0;
const E2E_COVERAGE: f64 = 0.60;
const E2E_BUDGET: Duration = Duration::from_secs(1800);
const ABLATION_SEEDS: u64 = 3;
const ABLATION_MARGIN: f64 = 0.5;
/// Epochs per ablation run; the 300-epoch desk schedule nine times over
/// would take hours on one core.
const ABLATION_EPOCHS: usize = 60;

enum Status {
    Pass,
    Fail,
    Info,
}

struct Line {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Line {
    Line { status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn c1_param_counts() -> Line {
    let got: Vec<usize> = [ModelSpec::REGRESSION, ModelSpec::CLASSIFICATION, ModelSpec::FILTERED]
        .iter()
        .map(|&s| Model64::build(s, 0).unwrap().param_count())
        .collect();
    verdict(got == [62_675, 70_676, 72_017], format!("SE {} / CE,CL {} / CL+F {}", got[0], got[1], got[2]))
}

fn c2_shape_chain() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ok = true;
    let mut shown = vec![];
    for spec in [ModelSpec::REGRESSION, ModelSpec::CLASSIFICATION, ModelSpec::FILTERED] {
        let model = Model64::build(spec, 0).unwrap();
        let input = Tensor64::new(&[2, 1, 18, 64], (0..2 * 18 * 64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, tape) = model.forward(input, Mode::Train, &mut rng).unwrap();
        let chain: Vec<String> = tape
            .shapes()
            .iter()
            .filter(|(name, _)| !name.contains('.') && !matches!(name.as_str(), "unsqueeze"))
            .map(|(_, shape)| match &shape[1..] {
                [_, h, w] => format!("{h}x{w}"),
                [_, w] => format!("{w}"),
                [w] => format!("{w}"),
                other => format!("{other:?}"),
            })
            .collect();
        let mut want = vec!["14x54", "10x44", "6x34", "2x24", "1x14", "224", "60"];
        want.extend(match spec.fc_out() {
            1 => vec!["1"],
            128 => vec!["128"],
            _ => vec!["134", "132", "130", "128", "128"],
        });
        ok &= chain == want;
        shown.push(chain.join("→"));
    }
    verdict(ok, shown.join(" | "))
}

fn c3_gradients() -> Line {
    let start = Instant::now();
    let suite = gradient_suite(GRAD_SEEDS, 4);
    let elapsed = start.elapsed();
    let failed: Vec<String> = suite.iter().filter(|e| !e.passed()).map(|e| e.to_string()).collect();
    let worst_layer = suite.iter().filter(|e| !e.name.starts_with("network")).map(|e| e.worst).fold(0.0, f64::max);
    let net = suite.iter().find(|e| e.name.starts_with("network")).map(|e| e.worst).unwrap_or(f64::NAN);
    let ok = failed.is_empty() && elapsed < GRAD_BUDGET;
    let mut detail =
        format!("{} checks x {GRAD_SEEDS} seeds, worst layer/loss {worst_layer:.1e}, network {net:.1e}, {:.0?}", suite.len(), elapsed);
    if !failed.is_empty() {
        detail += &format!("; failing: {}", failed.join("; "));
    }
    verdict(ok, detail)
}

fn c4_loss_identities() -> Line {
    let grid = ClassGrid::default();
    let (mut ce_err, mut cl_err, mut sum_err, mut shift_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..300).map(|_| rng.random_range(10..110)).collect();
        let w = class_weights(&labels, &grid).unwrap();
        sum_err = sum_err.max((w.0.iter().sum::<f64>() - 1.0).abs());
        let z: Vec<f64> = (0..128).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = rng.random_range(0..128);
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let naive = -w.get(y) * (e[y] / e.iter().sum::<f64>()).ln();
        let ce = ce_loss(&z, y, &w);
        ce_err = ce_err.max((ce - naive).abs());
        let target = smoothed_one_hot(y, &grid);
        sum_err = sum_err.max((target.iter().sum::<f64>() - 1.0).abs());
        cl_err = cl_err.max((cl_loss(&z, y, &w, 25.0, &grid) - ce - 25.0 * mse(&z, &target)).abs());
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        shift_err = shift_err.max((ce_loss(&shifted, y, &w) - ce).abs());
    }
    let ok = ce_err < IDENTITY_TOL && cl_err < IDENTITY_TOL && sum_err < SUM_TOL && shift_err < IDENTITY_TOL;
    verdict(ok, format!("CE vs softmax+NLL {ce_err:.1e}, CL−CE−25·MSE {cl_err:.1e}, sums {sum_err:.1e}, shift {shift_err:.1e}"))
}

fn c5_overfit() -> Line {
    let grid = ClassGrid::default();
    // 8 sequences of 9 s give 8 windows each, all kept for training.
    let synth = SynthConfig {
        n_sequences: 8,
        duration_s: 9.0,
        snr_db: None,
        hr_drift_bpm: 0.0,
        motion: false,
        seed: 5,
        ..Default::default()
    };
    let seqs = synth_generate(&synth).unwrap();
    let splits = prepare_splits(&seqs, &grid).unwrap();
    let start = Instant::now();
    let config = TrainConfig { epochs: 500, batch_size: 16, augment: false, ..Default::default() };
    let out = train_loop::<f32>(&config, &splits, &grid).unwrap();
    let preds: Vec<f64> =
        pulsegrid::eval::predict_samples(&out.last, &splits.train, &grid).unwrap().iter().map(|p| p.hr_bpm).collect();
    let refs: Vec<f64> = splits.train.iter().map(|s| s.ref_hr_bpm).collect();
    let m = mae(&preds, &refs).unwrap();
    let cov = coverage(&preds, &refs, Task::Classification, &grid).unwrap();
    verdict(
        splits.train.len() == 64 && cov >= OVERFIT_COVERAGE && m <= OVERFIT_MAE && start.elapsed() < OVERFIT_BUDGET,
        format!("{} samples, train coverage {:.1}%, MAE {m:.3} bpm, {:.0?}", splits.train.len(), 100.0 * cov, start.elapsed()),
    )
}

fn desk_splits(seed: u64) -> SplitSets {
    let seqs = synth_generate(&SynthConfig { seed, ..Default::default() }).unwrap();
    prepare_splits(&seqs, &ClassGrid::default()).unwrap()
}

fn c6_end_to_end() -> Line {
    let grid = ClassGrid::default();
    let splits = desk_splits(0);
    let start = Instant::now();
    let out = train_loop::<f32>(&TrainConfig::default(), &splits, &grid).unwrap();
    let report = evaluate(&out.best, &splits.test, &grid).unwrap();
    let full = report.row(pulsegrid::eval::Subset::Full);
    let (m, c) = (full.mae_bpm.unwrap(), full.coverage.unwrap());
    verdict(
        m <= E2E_MAE && c >= E2E_COVERAGE && start.elapsed() < E2E_BUDGET,
        format!(
            "test n={} MAE {m:.2} bpm, coverage {:.1}% (best epoch {:?}), {:.0?}",
            full.n_samples,
            100.0 * c,
            out.log.best_epoch,
            start.elapsed()
        ),
    )
}

fn c7_metric_oracles() -> Line {
    let grid = ClassGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p: Vec<f64> = (0..1000).map(|_| rng.random_range(40.0..=125.0)).collect();
    let r: Vec<f64> = (0..1000).map(|_| rng.random_range(40.0..=125.0)).collect();
    let (mut abs, mut reg, mut cls) = (0.0, 0usize, 0usize);
    let step = 85.0 / 128.0;
    for i in 0..1000 {
        abs += (p[i] - r[i]).abs();
        reg += ((p[i] - r[i]).abs() < 3.0) as usize;
        let lab = |v: f64| (((v - 40.0) / step).floor() as i64).min(127);
        cls += ((lab(p[i]) - lab(r[i])).abs() <= 4) as usize;
    }
    let mut ok = mae(&p, &r).unwrap() == abs / 1000.0
        && coverage(&p, &r, Task::Regression, &grid).unwrap() == reg as f64 / 1000.0
        && coverage(&p, &r, Task::Classification, &grid).unwrap() == cls as f64 / 1000.0;
    let at4 = coverage(&[grid.hr_of(14)], &[grid.hr_of(10)], Task::Classification, &grid).unwrap();
    let at5 = coverage(&[grid.hr_of(15)], &[grid.hr_of(10)], Task::Classification, &grid).unwrap();
    ok &= at4 == 1.0 && at5 == 0.0;
    verdict(ok, format!("1000 pairs exact; |Δlabel|=4 → {at4}, 5 → {at5}"))
}

fn c8_schedule() -> Line {
    let (lo, hi, t) = (5.8e-5, 5.8e-3, 1000);
    let trace: Vec<f64> = (0..t).map(|s| one_cycle_lr(s, t, lo, hi)).collect();
    let ends = trace[0] == lo && trace[t / 2] == hi && (trace[t - 1] - lo).abs() < 1e-18;
    let linear = (1..t - 1).filter(|&s| s != t / 2).all(|s| (trace[s - 1] - 2.0 * trace[s] + trace[s + 1]).abs() < 1e-15);
    let lrs = log_grid(1e-7, 10.0, 4);
    let argmin = lrs[19];
    let curve: Vec<Option<f64>> = lrs.iter().map(|l| Some(1.0 + (l.log10() - argmin.log10()).powi(2))).collect();
    let res = analyze_range_curve(&lrs, &curve, 0.5).unwrap();
    let range_ok = res.lr_max == argmin && res.lr_min == argmin / 100.0 && !res.at_boundary;
    verdict(
        ends && linear && range_ok,
        format!("1cycle ends {ends}, piecewise linear {linear}; range test → ({:.3e}, {:.3e}) for argmin {argmin:.3e}", res.lr_min, res.lr_max),
    )
}

fn c9_split_safety() -> Line {
    let grid = ClassGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    let mut bad = vec![];
    for _ in 0..50 {
        let frames = rng.random_range(64..3000);
        let cfg = SynthConfig { n_sequences: 1, duration_s: frames as f64 / 15.0, seed: rng.random(), ..Default::default() };
        let seq = synth_generate(&cfg).unwrap().remove(0);
        let splits = pulsegrid::data::split_sets(vec![window_sequence(&seq, &grid).unwrap()]);
        let clash = |a: &[pulsegrid::data::SignalSample]| {
            a.iter().any(|h| splits.train.iter().any(|t| h.origin.frames().start < t.origin.frames().end && t.origin.frames().start < h.origin.frames().end))
        };
        if clash(&splits.val) || clash(&splits.test) {
            bad.push(seq.frames());
        }
        checked += 1;
    }
    verdict(bad.is_empty(), format!("{checked} sequence lengths, overlaps at {bad:?}"))
}

fn c10_reference() -> Line {
    let Some(dir) = std::env::var_os("PULSEGRID_REFERENCE_DATA") else {
        return Line { status: Status::Info, detail: "skipped: PULSEGRID_REFERENCE_DATA not set".into() };
    };
    let grid = ClassGrid::default();
    let detail = (|| -> pulsegrid::Result<String> {
        let report = ingest(std::path::Path::new(&dir), &grid)?;
        let splits = prepare_splits(&report.sequences, &grid)?;
        let out = train_loop::<f32>(&TrainConfig::default(), &splits, &grid)?;
        let r = evaluate(&out.best, &splits.test, &grid)?;
        let full = r.row(pulsegrid::eval::Subset::Full);
        let (m, c) = (full.mae_bpm.unwrap_or(f64::NAN), full.coverage.unwrap_or(f64::NAN));
        Ok(format!("CL+F Full MAE {m:.2} bpm ({:+.2} vs 4.9), coverage {:.1}% ({:+.1} vs 48.1)", m - 4.9, 100.0 * c, 100.0 * c - 48.1))
    })()
    .unwrap_or_else(|e| format!("reference run failed: {e}"));
    Line { status: Status::Info, detail }
}

fn c11_ablation() -> Line {
    let grid = ClassGrid::default();
    let start = Instant::now();
    let kinds = [(LossKind::Se, false), (LossKind::Ce, false), (LossKind::Cl, true)];
    let mut means = [0.0; 3];
    for seed in 0..ABLATION_SEEDS {
        let splits = desk_splits(seed);
        for (k, &(loss, with_filter)) in kinds.iter().enumerate() {
            let config = TrainConfig { loss, with_filter, seed, epochs: ABLATION_EPOCHS, ..Default::default() };
            let out = train_loop::<f32>(&config, &splits, &grid).unwrap();
            let m: Model<f32> = out.best;
            means[k] += evaluate(&m, &splits.test, &grid).unwrap().full_mae().unwrap() / ABLATION_SEEDS as f64;
        }
    }
    let [se, ce, clf] = means;
    verdict(
        clf <= ce + ABLATION_MARGIN && ce <= se + ABLATION_MARGIN,
        format!("mean Full test MAE over {ABLATION_SEEDS} seeds at {ABLATION_EPOCHS} epochs: CL+F {clf:.2}, CE {ce:.2}, SE {se:.2} bpm, {:.0?}", start.elapsed()),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Line); 11] = [
        ("parameter counts", c1_param_counts),
        ("shape chain", c2_shape_chain),
        ("gradient suite", c3_gradients),
        ("loss identities", c4_loss_identities),
        ("overfit probe", c5_overfit),
        ("synthetic end-to-end", c6_end_to_end),
        ("metric oracles", c7_metric_oracles),
        ("1cycle and range test", c8_schedule),
        ("split safety", c9_split_safety),
        ("reference dataset", c10_reference),
        ("ablation ordering", c11_ablation),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let line = run();
        let tag = match line.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failures += 1;
                "FAIL"
            }
            Status::Info => "INFO",
        };
        println!("[{tag}] {id:>2} {name}: {}", line.detail);
    }
    println!("acceptance: {failures} failing");
    if failures > 0 {
        std::process::exit(1);
    }
}
