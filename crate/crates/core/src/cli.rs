//! Command-line front end: `train`, `eval`, `forecast`, `decompose`,
//! `bench`, `gradcheck` and `generate`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autocorr::MechanismKind;
use crate::bench::{run_bench, BenchConfig, BenchReport};
use crate::checks::{run_all, SuiteOptions};
use crate::data::{
    chronological_split, generate_synthetic, load_csv, make_windows, save_csv, Scaler, SyntheticSpec, TimeSeriesFrame,
    Timestamps, WindowSample,
};
use crate::error::{Error, Result};
use crate::model::{AutoformerModel, ModelConfig};
use crate::series::series_decomp;
use crate::train::{evaluate, persistence_metrics, train_with, EpochRecord, Metrics, TrainConfig, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GRADCHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Shape { .. } => EXIT_DATA,
        Error::NonFinite(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "autoformer", version, about = "Decomposition forecasting with FFT Auto-Correlation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a CSV and write model, history and manifest.
    Train(TrainArgs),
    /// Score a trained model on one split.
    Eval(EvalArgs),
    /// Forecast the horizon after the last rows of a CSV.
    Forecast(ForecastArgs),
    /// Split every channel into seasonal and trend columns.
    Decompose(DecomposeArgs),
    /// Time the attention mechanism alone over sequence lengths.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic series.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mechanism: Option<MechanismKind>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Metrics file; defaults to `metrics_<split>.json` in the model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "autocorr_speedup")]
    pub mechanism: MechanismKind,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run config whose `model` section is checked; the tiny config otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mechanism: Option<MechanismKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON synthetic-series spec.
    #[arg(long, alias = "spec")]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        ["train", "val", "test"][self.index()]
    }
}

fn default_split() -> [f64; 3] {
    [7.0, 1.0, 2.0]
}

/// Training run description: `{"model": {...}, "train": {...}, "split": [a, b, c]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl RunConfig {
    /// Parses a run config, taking `channels` and `time_channels` from
    /// `frame` when the model section leaves them out.
    pub fn from_json(text: &str, frame: Option<&TimeSeriesFrame>) -> Result<Self> {
        let mut doc: serde_json::Value = serde_json::from_str(text)?;
        if let (Some(frame), Some(model)) = (frame, doc.get_mut("model").and_then(|m| m.as_object_mut())) {
            model
                .entry("channels")
                .or_insert_with(|| frame.n_channels().into());
            model
                .entry("time_channels")
                .or_insert_with(|| frame.timestamps.mark_width().into());
        }
        let cfg: RunConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.split.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("split", "ratios must be positive"));
        }
        Ok(())
    }

    fn check_frame(&self, frame: &TimeSeriesFrame) -> Result<()> {
        if self.model.channels != frame.n_channels() {
            return Err(Error::config(
                "channels",
                format!("config has {}, data has {}", self.model.channels, frame.n_channels()),
            ));
        }
        if self.model.time_channels != frame.timestamps.mark_width() {
            return Err(Error::config(
                "time_channels",
                format!("config has {}, data timestamps give {}", self.model.time_channels, frame.timestamps.mark_width()),
            ));
        }
        Ok(())
    }
}

/// Windows of every split in normalised units, plus the training statistics.
pub struct PreparedData {
    pub windows: [Vec<WindowSample>; 3],
    pub scaler: Scaler,
}

pub fn prepare_data(frame: &TimeSeriesFrame, model: &ModelConfig, split: [f64; 3], scaler: Option<&Scaler>) -> Result<PreparedData> {
    let need = model.input_len + model.pred_len;
    let parts = chronological_split(frame, split, need)?;
    let scaler = match scaler {
        Some(s) => s.clone(),
        None => Scaler::fit(&parts[0])?,
    };
    let mut windows: [Vec<WindowSample>; 3] = Default::default();
    for (w, part) in windows.iter_mut().zip(&parts) {
        *w = make_windows(&scaler.normalize(part)?, model.input_len, model.pred_len, 1)?;
    }
    Ok(PreparedData { windows, scaler })
}

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub scaler: Scaler,
    pub test: Metrics,
    pub test_baseline: Metrics,
}

/// Train on the first split, early-stop on the second, score the third.
pub fn run_experiment(cfg: &RunConfig, frame: &TimeSeriesFrame, on_epoch: impl FnMut(&EpochRecord)) -> Result<RunResult> {
    cfg.validate()?;
    cfg.check_frame(frame)?;
    let data = prepare_data(frame, &cfg.model, cfg.split, None)?;
    let model = AutoformerModel::new(cfg.model.clone())?;
    let [tr, va, te] = &data.windows;
    let outcome = train_with(model, tr, va, &cfg.train, on_epoch)?;
    let test = evaluate(&outcome.model, te, cfg.train.batch_size)?;
    let test_baseline = persistence_metrics(te)?;
    Ok(RunResult {
        outcome,
        scaler: data.scaler,
        test,
        test_baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub path: String,
    pub rows: usize,
    pub sha256: String,
}

impl DataFingerprint {
    pub fn of(path: &Path, frame: &TimeSeriesFrame) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(DataFingerprint {
            path: path.display().to_string(),
            rows: frame.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub data: DataFingerprint,
    pub artifacts: Vec<String>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

const MODEL_FILE: &str = "model.json";
const HISTORY_FILE: &str = "history.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const SCALER_FILE: &str = "scaler.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let text = read_config(&args.config)?;
    let frame = load_csv(&args.data)?;
    let mut cfg = RunConfig::from_json(&text, Some(&frame))?;
    if let Some(m) = args.mechanism {
        cfg.model.mechanism = m;
    }
    if let Some(s) = args.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let fingerprint = DataFingerprint::of(&args.data, &frame)?;
    let result = run_experiment(&cfg, &frame, |r| {
        eprintln!(
            "epoch {:>3}  train_mse {:.6}  val_mse {:.6}  {:.1}s",
            r.epoch, r.train_mse, r.val_mse, r.wall_seconds
        );
    })?;

    fs::create_dir_all(&args.out)?;
    result.outcome.model.save(&args.out.join(MODEL_FILE))?;
    let mut history = fs::File::create(args.out.join(HISTORY_FILE))?;
    for r in &result.outcome.history {
        writeln!(history, "{}", serde_json::to_string(r)?)?;
    }
    write_json(&args.out.join(SCALER_FILE), &result.scaler)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.train.seed,
        config: cfg,
        data: fingerprint,
        artifacts: [MODEL_FILE, HISTORY_FILE, SCALER_FILE, MANIFEST_FILE].map(String::from).to_vec(),
        best_epoch: result.outcome.best_epoch,
        best_val_mse: result.outcome.best_val_mse,
        epochs_run: result.outcome.history.len(),
        stopped_early: result.outcome.stopped_early,
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mechanism: MechanismKind,
    pub units: String,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
}

struct LoadedRun {
    model: AutoformerModel,
    manifest: RunManifest,
    scaler: Scaler,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let scaler: Scaler = read_json(&dir.join(SCALER_FILE))?;
    let model = AutoformerModel::load(&dir.join(MODEL_FILE)).map_err(|e| match e {
        Error::Json(j) => Error::Data(format!("{}: {j}", dir.join(MODEL_FILE).display())),
        other => other,
    })?;
    Ok(LoadedRun { model, manifest, scaler })
}

fn check_model_data(model: &ModelConfig, frame: &TimeSeriesFrame) -> Result<()> {
    if model.channels != frame.n_channels() || model.time_channels != frame.timestamps.mark_width() {
        return Err(Error::shape(
            "data",
            format!(
                "model expects {} channels and {} time features, data has {} and {}",
                model.channels,
                model.time_channels,
                frame.n_channels(),
                frame.timestamps.mark_width()
            ),
        ));
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let split: Split = args.split.parse()?;
    let run = load_run(&args.model)?;
    let frame = load_csv(&args.data)?;
    let cfg = run.model.config();
    check_model_data(cfg, &frame)?;
    let data = prepare_data(&frame, cfg, run.manifest.config.split, Some(&run.scaler))?;
    let windows = &data.windows[split.index()];
    let metrics = evaluate(&run.model, windows, run.manifest.config.train.batch_size)?;
    let baseline = persistence_metrics(windows)?;
    let report = EvalReport {
        split: split.name().to_string(),
        mechanism: cfg.mechanism,
        units: "normalized".to_string(),
        mse: metrics.mse,
        mae: metrics.mae,
        n_windows: metrics.n_windows,
        baseline_mse: baseline.mse,
        baseline_mae: baseline.mae,
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.model.join(format!("metrics_{}.json", split.name())));
    write_json(&out, &report)?;
    Ok(report)
}

fn extend_timestamps(ts: &Timestamps, n: usize) -> Result<Timestamps> {
    match ts {
        Timestamps::Index { values, range } => {
            let last = *values.last().ok_or_else(|| Error::Data("empty frame".into()))?;
            let step = if values.len() >= 2 { last - values[values.len() - 2] } else { 1 };
            Ok(Timestamps::Index {
                values: (1..=n as i64).map(|i| last + i * step).collect(),
                range: *range,
            })
        }
        Timestamps::DateTime(v) => {
            if v.len() < 2 {
                return Err(Error::Data("need two timestamps to infer the sampling interval".into()));
            }
            let last = v[v.len() - 1];
            let step = last - v[v.len() - 2];
            Ok(Timestamps::DateTime((1..=n as i32).map(|i| last + step * i).collect()))
        }
    }
}

/// Forecast of the `O` steps after the input, in the data's own units.
pub fn cmd_forecast(args: &ForecastArgs) -> Result<TimeSeriesFrame> {
    let run = load_run(&args.model)?;
    let frame = load_csv(&args.data)?;
    let cfg = run.model.config().clone();
    check_model_data(&cfg, &frame)?;
    if frame.len() < cfg.input_len {
        return Err(Error::Data(format!("{} rows, the model needs {}", frame.len(), cfg.input_len)));
    }
    let input = run.scaler.normalize(&frame.slice(frame.len() - cfg.input_len, frame.len()))?;
    let future = extend_timestamps(&input.timestamps, cfg.pred_len)?;
    let horizon = TimeSeriesFrame::new(future.clone(), frame.channels.clone(), vec![0.0; cfg.pred_len * frame.n_channels()])?;
    let (dt, label) = (frame.timestamps.mark_width(), cfg.label_len());
    let enc_marks = input.time_marks();
    let mut dec_marks = enc_marks[(cfg.input_len - label) * dt..].to_vec();
    dec_marks.extend(horizon.time_marks());
    let t = |shape: Vec<usize>, data: Vec<f64>| crate::tensor::Tensor::new(shape, data);
    let pred = run.model.autoformer_forward(
        &t(vec![cfg.input_len, cfg.channels], input.values.clone())?,
        &t(vec![cfg.input_len, dt], enc_marks)?,
        &t(vec![label + cfg.pred_len, dt], dec_marks)?,
    )?;
    let out = TimeSeriesFrame::new(future, frame.channels.clone(), run.scaler.denormalize(pred.data()))?;
    save_csv(&out, &args.out)?;
    Ok(out)
}

pub fn cmd_decompose(args: &DecomposeArgs) -> Result<()> {
    crate::series::check_window(args.window)?;
    let frame = load_csv(&args.data)?;
    let pair = series_decomp(&frame.to_tensor(), args.window)?;
    let d = frame.n_channels();
    let mut channels = Vec::with_capacity(2 * d);
    for c in &frame.channels {
        channels.push(format!("{c}_seasonal"));
        channels.push(format!("{c}_trend"));
    }
    let mut values = Vec::with_capacity(2 * frame.values.len());
    for (s, t) in pair.seasonal.data().iter().zip(pair.trend.data()) {
        values.push(*s);
        values.push(*t);
    }
    let out = TimeSeriesFrame::new(frame.timestamps.clone(), channels, values)?;
    save_csv(&out, &args.out)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchReport> {
    let mut cfg = BenchConfig::new(args.mechanism, args.lengths.clone());
    cfg.repeats = args.repeats;
    cfg.d_model = args.d_model;
    cfg.seed = args.seed;
    let report = run_bench(&cfg)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// Returns the exit code: 0 when every suite passes, 1 otherwise.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_json(&read_config(p)?, None)?.model,
        None => ModelConfig::tiny(),
    };
    if let Some(m) = args.mechanism {
        cfg.mechanism = m;
    }
    let opts = SuiteOptions {
        seed: args.seed,
        corrupt: args.corrupt_gradient,
        ..SuiteOptions::default()
    };
    let suites = run_all(&cfg, &opts)?;
    let mut ok = true;
    for s in &suites {
        let verdict = if s.passed() { "pass" } else { "FAIL" };
        ok &= s.passed();
        println!(
            "{:<32} {:>5} checked  {:>6.2}% within {:.0e}  worst {:.3e}  {verdict}",
            s.name,
            s.checked,
            100.0 * s.fraction_within(),
            s.tolerance,
            s.worst_relative_error
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_GRADCHECK })
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<TimeSeriesFrame> {
    let mut spec: SyntheticSpec = serde_json::from_str(&read_config(&args.config)?)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let frame = generate_synthetic(&spec)?;
    save_csv(&frame, &args.out)?;
    Ok(frame)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => {
            let m = cmd_train(a)?;
            println!(
                "best epoch {} of {}: val_mse {:.6}; wrote {}",
                m.best_epoch,
                m.epochs_run,
                m.best_val_mse,
                a.out.display()
            );
        }
        Command::Eval(a) => println!("{}", serde_json::to_string_pretty(&cmd_eval(a)?)?),
        Command::Forecast(a) => {
            let f = cmd_forecast(a)?;
            println!("wrote {} forecast rows to {}", f.len(), a.out.display());
        }
        Command::Decompose(a) => cmd_decompose(a)?,
        Command::Bench(a) => println!("{}", serde_json::to_string_pretty(&cmd_bench(a)?)?),
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::Generate(a) => {
            let f = cmd_generate(a)?;
            println!("wrote {} rows to {}", f.len(), a.out.display());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
