//! `pulsegrid` — synthesize, validate, train, probe learning rates,
//! evaluate and build cross-camera matrices.
//!
//! Exit codes: 0 success, 1 internal failure, 2 invalid input or config.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use pulsegrid::checkpoint::{Checkpoint, CheckpointMeta};
use pulsegrid::data::{
    ingest, prepare_splits, synth_generate, window_sequence, write_dataset, Camera, ColorSignalSequence, Scenario,
    SignalSample, SplitPolicy, SplitSets, SynthConfig,
};
use pulsegrid::eval::{evaluate, generalization_matrix};
use pulsegrid::losses::LossKind;
use pulsegrid::model::{ClassGrid, Model};
use pulsegrid::train::{lr_range_test, train_loop, RangeTestConfig, TrainConfig};
use pulsegrid::Scalar;

use manifest::{fingerprint, RunManifest, MANIFEST_NAME};

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Internal(String),
}

impl From<pulsegrid::Error> for Failure {
    fn from(e: pulsegrid::Error) -> Self {
        if e.is_invalid_input() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn internal(context: &str) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Internal(format!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "pulsegrid", version, about = "Heart rate from facial color signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the ingest format.
    Synth(SynthArgs),
    /// Ingest a dataset directory and report rejected files.
    Validate(DataArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Learning-rate range test.
    LrFind(LrFindArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train one model per camera subset and tabulate test MAE per camera.
    Genmatrix(TrainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synthesis settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequences: Option<usize>,
    /// Sequence length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    hr_min: Option<f64>,
    #[arg(long)]
    hr_max: Option<f64>,
    /// Signal-to-noise ratio in dB.
    #[arg(long, conflicts_with = "noiseless")]
    snr: Option<f64>,
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Se,
    Ce,
    Cl,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Se => LossKind::Se,
            LossArg::Ce => LossKind::Ce,
            LossArg::Cl => LossKind::Cl,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Append the 1D filtering stack (classification losses only).
    #[arg(long, conflicts_with = "no_filter")]
    filter: bool,
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Train only on these cameras, e.g. `1,3` or `Cam2`.
    #[arg(long, value_delimiter = ',')]
    cameras: Option<Vec<String>>,
    /// Train only on this scenario (stationary or mixed_motion).
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct LrFindArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    lr_lo: Option<f64>,
    #[arg(long)]
    lr_hi: Option<f64>,
    #[arg(long)]
    points_per_decade: Option<usize>,
    #[arg(long)]
    epochs_per_point: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// Test windows of every sequence.
    Test,
    /// Every window.
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_delimiter = ',')]
    cameras: Option<Vec<String>>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    force: bool,
}

/// Creates `out`, refusing to reuse a non-empty directory without `force`.
fn prepare_out(out: &Path, force: bool) -> CliResult {
    if out.is_file() {
        return Err(Failure::Invalid(format!("{} is a file, not a directory", out.display())));
    }
    if out.is_dir() && !force && fs::read_dir(out).map_err(internal("reading output dir"))?.next().is_some() {
        return Err(Failure::Invalid(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(internal("creating output dir"))
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Invalid(format!("config {}: {e}", path.display())))
}

fn json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn write_text(path: &Path, body: &str) -> CliResult {
    fs::write(path, body).map_err(internal("writing output"))
}

fn load_sequences(dir: &Path, grid: &ClassGrid) -> CliResult<Vec<ColorSignalSequence>> {
    if !dir.is_dir() {
        return Err(Failure::Invalid(format!("data directory {} does not exist", dir.display())));
    }
    let report = ingest(dir, grid)?;
    for r in &report.rejections {
        warn!("rejected {}: {}", r.file, r.reason);
    }
    if report.sequences.is_empty() {
        return Err(Failure::Invalid(format!("no usable sequences in {}", dir.display())));
    }
    info!("{} sequences loaded, {} rejected", report.sequences.len(), report.rejections.len());
    Ok(report.sequences)
}

fn parse_policy(cameras: &Option<Vec<String>>, scenario: &Option<String>) -> CliResult<SplitPolicy> {
    let train_cameras = cameras
        .as_ref()
        .map(|list| list.iter().map(|c| c.parse::<Camera>()).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    let scenario = scenario.as_deref().map(str::parse::<Scenario>).transpose()?;
    Ok(SplitPolicy { train_cameras, scenario })
}

fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = read_toml(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(loss) = args.loss {
        cfg.loss = loss.into();
        // A bare `--loss se` means the plain regression model.
        if cfg.loss == LossKind::Se && !args.filter {
            cfg.with_filter = false;
        }
    }
    if args.filter {
        cfg.with_filter = true;
    }
    if args.no_filter {
        cfg.with_filter = false;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads, windows and splits the data, then applies the training filter.
fn training_splits(args: &TrainArgs, grid: &ClassGrid) -> CliResult<SplitSets> {
    let policy = parse_policy(&args.cameras, &args.scenario)?;
    let sequences = load_sequences(&args.data, grid)?;
    let splits = prepare_splits(&sequences, grid)?.restrict_training(&policy);
    info!("split: {} train / {} val / {} test", splits.train.len(), splits.val.len(), splits.test.len());
    if splits.train.len() < 2 {
        return Err(Failure::Invalid("fewer than 2 training samples after filtering".into()));
    }
    Ok(splits)
}

fn start_run(command: &str, args: &TrainArgs, cfg: &TrainConfig, artifacts: &[&str]) -> CliResult<RunManifest> {
    prepare_out(&args.out, args.force)?;
    let mut m = RunManifest::new(command, cfg.seed, json(cfg));
    m.data_fingerprint = Some(fingerprint(&args.data).map_err(internal("hashing data"))?);
    m.artifacts = artifacts.iter().map(|s| s.to_string()).collect();
    m.write(&args.out).map_err(internal("writing manifest"))?;
    info!("manifest written to {}", args.out.join(MANIFEST_NAME).display());
    Ok(m)
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let mut cfg: SynthConfig = read_toml(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.sequences {
        cfg.n_sequences = v;
    }
    if let Some(v) = args.duration {
        cfg.duration_s = v;
    }
    if let Some(v) = args.hr_min {
        cfg.hr_min = v;
    }
    if let Some(v) = args.hr_max {
        cfg.hr_max = v;
    }
    if let Some(v) = args.snr {
        cfg.snr_db = Some(v);
    }
    if args.noiseless {
        cfg.snr_db = None;
    }
    cfg.validate()?;
    prepare_out(&args.out, args.force)?;
    let mut m = RunManifest::new("synth", cfg.seed, json(&cfg));
    m.artifacts = vec![pulsegrid::data::MANIFEST_FILE.into()];
    m.artifacts.extend((0..cfg.n_sequences).map(|i| format!("syn{i:03}.csv")));
    m.write(&args.out).map_err(internal("writing manifest"))?;
    let sequences = synth_generate(&cfg)?;
    write_dataset(&args.out, &sequences)?;
    println!("wrote {} sequences to {}", sequences.len(), args.out.display());
    Ok(())
}

fn cmd_validate(args: DataArgs) -> CliResult {
    let grid = ClassGrid::default();
    if !args.data.is_dir() {
        return Err(Failure::Invalid(format!("data directory {} does not exist", args.data.display())));
    }
    let report = ingest(&args.data, &grid)?;
    for s in &report.sequences {
        println!("ok       {} ({}, {}, {} frames)", s.id, s.camera, s.scenario, s.frames());
    }
    for r in &report.rejections {
        println!("rejected {}: {}", r.file, r.reason);
    }
    if report.sequences.is_empty() || !report.rejections.is_empty() {
        return Err(Failure::Invalid(format!(
            "{} valid, {} rejected",
            report.sequences.len(),
            report.rejections.len()
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let grid = ClassGrid::default();
    let cfg = train_config(&args)?;
    let artifacts = ["checkpoint.json", "config.toml", "train_log.csv", "report.csv", "report.json", "scatter.csv"];
    start_run("train", &args, &cfg, &artifacts)?;
    let splits = training_splits(&args, &grid)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml())?;
    let outcome = train_loop::<f32>(&cfg, &splits, &grid)?;
    let meta = CheckpointMeta {
        epoch: outcome.log.best_epoch,
        val_mae: outcome.log.best_val_mae,
        loss: Some(cfg.loss.name().into()),
    };
    Checkpoint::from_model(&outcome.best, meta).save(&args.out.join("checkpoint.json"))?;
    write_text(&args.out.join("train_log.csv"), &outcome.log.to_csv())?;
    let report = evaluate(&outcome.best, &splits.test, &grid)?;
    report.write(&args.out)?;
    println!("best epoch {:?}, val MAE {:?}\n{report}", outcome.log.best_epoch, outcome.log.best_val_mae);
    Ok(())
}

fn cmd_lr_find(args: LrFindArgs) -> CliResult {
    let grid = ClassGrid::default();
    let cfg = train_config(&args.train)?;
    let mut range = RangeTestConfig::default();
    if let Some(v) = args.lr_lo {
        range.lr_lo = v;
    }
    if let Some(v) = args.lr_hi {
        range.lr_hi = v;
    }
    if let Some(v) = args.points_per_decade {
        range.points_per_decade = v;
    }
    if let Some(v) = args.epochs_per_point {
        range.epochs_per_point = v;
    }
    range.grid()?;
    let mut m = start_run("lr-find", &args.train, &cfg, &["lr_curve.csv", "lr_range.json"])?;
    m.config = serde_json::json!({ "train": json(&cfg), "range_test": json(&range) });
    m.write(&args.train.out).map_err(internal("writing manifest"))?;
    let splits = training_splits(&args.train, &grid)?;
    let result = lr_range_test::<f32>(&cfg, &range, &splits, &grid)?;
    write_text(&args.train.out.join("lr_curve.csv"), &result.to_csv())?;
    write_text(
        &args.train.out.join("lr_range.json"),
        &serde_json::to_string_pretty(&result).expect("result serializes"),
    )?;
    println!(
        "lr_min {:.3e}  lr_max {:.3e}{}",
        result.lr_min,
        result.lr_max,
        if result.at_boundary { "  (minimum at grid edge)" } else { "" }
    );
    Ok(())
}

fn eval_with<T: Scalar>(ck: &Checkpoint, samples: &[SignalSample], grid: &ClassGrid, out: &Path) -> CliResult {
    let model: Model<T> = ck.to_model()?;
    let report = evaluate(&model, samples, grid)?;
    report.write(out)?;
    println!("{report}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let grid = ClassGrid::default();
    let ck = Checkpoint::load(&args.checkpoint)?;
    let policy = parse_policy(&args.cameras, &args.scenario)?;
    prepare_out(&args.out, args.force)?;
    let mut m = RunManifest::new(
        "eval",
        ck.seed,
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "split": match args.split { SplitArg::Test => "test", SplitArg::All => "all" },
            "policy": json(&policy),
        }),
    );
    m.data_fingerprint = Some(fingerprint(&args.data).map_err(internal("hashing data"))?);
    m.artifacts = ["report.csv", "report.json", "scatter.csv"].map(String::from).to_vec();
    m.write(&args.out).map_err(internal("writing manifest"))?;

    let sequences = load_sequences(&args.data, &grid)?;
    let mut samples = match args.split {
        SplitArg::Test => prepare_splits(&sequences, &grid)?.test,
        SplitArg::All => sequences
            .iter()
            .map(|s| window_sequence(s, &grid))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect(),
    };
    samples.retain(|s| policy.admits(s.camera, s.scenario));
    if samples.is_empty() {
        return Err(Failure::Invalid("no samples to evaluate".into()));
    }
    match ck.scalar.as_str() {
        "f32" => eval_with::<f32>(&ck, &samples, &grid, &args.out),
        _ => eval_with::<f64>(&ck, &samples, &grid, &args.out),
    }
}

fn cmd_genmatrix(args: TrainArgs) -> CliResult {
    let grid = ClassGrid::default();
    let cfg = train_config(&args)?;
    start_run("genmatrix", &args, &cfg, &["matrix.csv", "matrix.json"])?;
    let splits = training_splits(&args, &grid)?;
    let matrix = generalization_matrix(&splits, &cfg, &grid)?;
    write_text(&args.out.join("matrix.csv"), &matrix.to_csv())?;
    write_text(&args.out.join("matrix.json"), &serde_json::to_string_pretty(&matrix).expect("matrix serializes"))?;
    print!("{}", matrix.to_csv());
    Ok(())
}

fn init_threads() -> CliResult {
    if let Ok(v) = std::env::var("PULSEGRID_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Invalid(format!("PULSEGRID_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Train(a) => cmd_train(a),
        Command::LrFind(a) => cmd_lr_find(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Genmatrix(a) => cmd_genmatrix(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
