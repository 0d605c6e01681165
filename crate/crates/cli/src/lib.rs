//! Batch front end: preprocess, train, predict, evaluate and lag-scan.

pub mod config;
pub mod error;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use tst_core::data::{
    condense, ingest_csv, make_windows, moving_average, parse_marker, preprocess_marker, split_at, synth_degradation,
    write_csv, NormStats, SynthSpec, TimeSeries,
};
use tst_core::metrics::MetricsReport;
use tst_core::model::TSTransformer;
use tst_core::training::{
    load_checkpoint, rolling_forecast, save_checkpoint, train, Checkpoint, ForecastResult, TrainReport,
};

pub use config::RunConfig;
pub use error::{CliError, ExitKind, Result};

#[derive(Debug, Parser)]
#[command(name = "tst", version, about = "Stack-voltage forecasting and RUL prognostics")]
pub struct Cli {
    /// `key=value` run configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=50`; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Condense to fixed bins and smooth with a moving average
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model on the training span and save a checkpoint
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Loss history CSV; defaults to `<checkpoint stem>_loss.csv`
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Rolling forecast over the test span
    Predict {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics report CSV and SVG plot for a forecast
    Evaluate {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// SVG path; defaults to the report path with an `.svg` extension
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Lag error per threshold for several lookback windows
    LagScan {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated lookbacks; defaults to the `lag_windows` key
        #[arg(long, value_delimiter = ',')]
        windows: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic ageing run as raw CSV
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000.0)]
    pub hours: f64,
    /// Target plus covariates
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// Sampling interval in hours
    #[arg(long)]
    pub sample_interval: Option<f64>,
    /// Gaussian noise on the voltage, in volts
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub periodic_amplitude: Option<f64>,
    /// Disable noise, the periodic term and covariate wander
    #[arg(long)]
    pub noise_free: bool,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        let mut spec = SynthSpec::default();
        if let Some(dt) = self.sample_interval {
            spec.sample_interval_hours = dt;
        }
        if let Some(n) = self.noise_std {
            spec.noise_std = n;
        }
        if let Some(a) = self.periodic_amplitude {
            spec.periodic_amplitude = a;
        }
        if self.noise_free {
            spec = spec.noise_free();
        }
        spec
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code, printing any error to stderr.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Preprocess { input, out } => {
            let s = cmd_preprocess(input, out, &cfg)?;
            if s.passthrough {
                println!("{} already preprocessed; {} rows copied", input.display(), s.rows_out);
            } else {
                println!("rows: {} in, {} dropped, {} out", s.rows_in, s.dropped, s.rows_out);
            }
        }
        Command::Train {
            data,
            out_checkpoint,
            loss_out,
        } => {
            let data = data_path(data.as_deref(), &cfg)?;
            let loss_path = loss_out.clone().unwrap_or_else(|| default_loss_path(out_checkpoint));
            let s = cmd_train(&data, &cfg, out_checkpoint, &loss_path)?;
            println!(
                "{} windows, {} epochs, final mean loss {:e}; wrote {} and {}",
                s.windows,
                s.report.loss_history.len(),
                s.report.loss_history.last().copied().unwrap_or(f64::NAN),
                out_checkpoint.display(),
                loss_path.display()
            );
        }
        Command::Predict { data, checkpoint, out } => {
            let data = data_path(data.as_deref(), &cfg)?;
            let f = cmd_predict(&data, checkpoint, out, &cfg)?;
            println!("{} forecast rows written to {}", f.len(), out.display());
        }
        Command::Evaluate { forecast, out, plot } => {
            let plot = plot.clone().unwrap_or_else(|| out.with_extension("svg"));
            let r = cmd_evaluate(forecast, out, &plot, &cfg)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            let score = r.score_rul.map_or_else(|| "NA".to_string(), |s| format!("{s:.4}"));
            println!("rmse {:.6} V, Score_RUL {score}; wrote {} and {}", r.rmse, out.display(), plot.display());
        }
        Command::LagScan { data, windows, out } => {
            let data = data_path(data.as_deref(), &cfg)?;
            let windows = if windows.is_empty() { cfg.lag_windows.clone() } else { windows.clone() };
            let table = cmd_lag_scan(&data, &windows, out, &cfg)?;
            print!("{}", table.to_csv());
        }
        Command::Synth(args) => {
            let ts = cmd_synth(args)?;
            println!("{} rows x {} channels written to {}", ts.len(), ts.n_channels(), args.out.display());
        }
    }
    Ok(())
}

fn data_path(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::usage("no input data: pass --data or set the `data` key"))
}

pub fn default_loss_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}_loss.csv"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub rows_in: usize,
    pub dropped: usize,
    pub rows_out: usize,
    pub passthrough: bool,
}

/// Reads a CSV and returns it preprocessed with the configured interval and
/// moving-average window. Files whose marker records the same settings are
/// used as they are; a marker with other settings is an error.
pub fn load_series(path: &Path, cfg: &RunConfig) -> Result<(TimeSeries, PreprocessSummary)> {
    let ing = ingest_csv(path, &cfg.schema())?;
    let rows_in = ing.series.len() + ing.dropped_rows;
    if let Some(marker) = &ing.marker {
        let (interval, ma) = parse_marker(marker)
            .ok_or_else(|| CliError::usage(format!("{}: unreadable marker {marker:?}", path.display())))?;
        if (interval - cfg.interval).abs() > 1e-12 || ma != cfg.ma_window {
            return Err(CliError::usage(format!(
                "{} was preprocessed with interval={interval}h ma={ma}, configuration asks for interval={}h ma={}",
                path.display(),
                cfg.interval,
                cfg.ma_window
            )));
        }
        let rows_out = ing.series.len();
        return Ok((
            ing.series,
            PreprocessSummary {
                rows_in,
                dropped: ing.dropped_rows,
                rows_out,
                passthrough: true,
            },
        ));
    }
    let ts = moving_average(&condense(&ing.series, cfg.interval)?, cfg.ma_window)?;
    let rows_out = ts.len();
    Ok((
        ts,
        PreprocessSummary {
            rows_in,
            dropped: ing.dropped_rows,
            rows_out,
            passthrough: false,
        },
    ))
}

pub fn cmd_preprocess(input: &Path, out: &Path, cfg: &RunConfig) -> Result<PreprocessSummary> {
    let (ts, summary) = load_series(input, cfg)?;
    let marker = preprocess_marker(cfg.interval, cfg.ma_window);
    write_csv(&ts, &cfg.time_column, Some(&marker), out)?;
    Ok(summary)
}

/// Model fitted on the training span of a preprocessed series.
pub struct Fitted {
    pub model: TSTransformer<f64>,
    pub stats: NormStats,
    pub report: TrainReport,
    pub windows: usize,
}

pub fn fit(series: &TimeSeries, cfg: &RunConfig) -> Result<Fitted> {
    let (train_span, _) = split_at(series, cfg.split_hours)?;
    let stats = NormStats::fit(&train_span)?;
    if !stats.flagged.is_empty() {
        warn!("constant channels in the training span: {}", stats.flagged.join(", "));
    }
    let z = stats.apply(&train_span)?;
    let data = make_windows(&z, cfg.lookback, cfg.horizon, cfg.window_stride)?;
    let mut model = TSTransformer::<f64>::new(cfg.model_config(series.n_channels()).map_err(CliError::usage)?, cfg.seed)?;
    info!("training on {} windows, lookback {}", data.len(), cfg.lookback);
    let report = train(&mut model, &data, &cfg.train_config())?;
    Ok(Fitted {
        model,
        stats,
        report,
        windows: data.len(),
    })
}

/// Rolling forecast of the test span after `split_hours`.
pub fn forecast(model: &TSTransformer<f64>, stats: &NormStats, series: &TimeSeries, cfg: &RunConfig) -> Result<ForecastResult> {
    let (history, test) = split_at(series, cfg.split_hours)?;
    let step = if cfg.forecast_step == 0 {
        model.config().horizon
    } else {
        cfg.forecast_step
    };
    Ok(rolling_forecast(
        model,
        &stats.apply(&history)?,
        &stats.apply(&test)?,
        stats,
        step,
        cfg.covariate_mode,
    )?)
}

// Keys stored in the checkpoint so predict reproduces the training setup.
const RECORDED_KEYS: [&str; 6] = ["time_column", "interval", "ma_window", "split_hours", "forecast_step", "covariate_mode"];

fn recorded_value(cfg: &RunConfig, key: &str) -> String {
    match key {
        "time_column" => cfg.time_column.clone(),
        "interval" => cfg.interval.to_string(),
        "ma_window" => cfg.ma_window.to_string(),
        "split_hours" => cfg.split_hours.to_string(),
        "forecast_step" => cfg.forecast_step.to_string(),
        "covariate_mode" => cfg.covariate_mode.to_string(),
        _ => unreachable!("unrecorded key {key}"),
    }
}

pub struct TrainSummary {
    pub report: TrainReport,
    pub windows: usize,
}

pub fn cmd_train(data: &Path, cfg: &RunConfig, checkpoint: &Path, loss_out: &Path) -> Result<TrainSummary> {
    let (series, _) = load_series(data, cfg)?;
    let fitted = fit(&series, cfg)?;
    let mut meta: Vec<(String, String)> = RECORDED_KEYS.iter().map(|k| (k.to_string(), recorded_value(cfg, k))).collect();
    let tc = cfg.train_config();
    meta.extend([
        ("lr".to_string(), tc.learning_rate.to_string()),
        ("epochs".to_string(), tc.epochs.to_string()),
        ("batch".to_string(), tc.batch_size.to_string()),
        ("seed".to_string(), tc.seed.to_string()),
        ("clip_norm".to_string(), tc.clip_norm.to_string()),
        ("patience".to_string(), cfg.patience.to_string()),
        ("window_stride".to_string(), cfg.window_stride.to_string()),
        ("epochs_run".to_string(), fitted.report.loss_history.len().to_string()),
    ]);
    let ck = Checkpoint::from_model(&fitted.model, fitted.stats, meta);
    save_checkpoint(checkpoint, &ck)?;
    write_text(loss_out, &fitted.report.loss_csv())?;
    Ok(TrainSummary {
        report: fitted.report,
        windows: fitted.windows,
    })
}

pub fn cmd_predict(data: &Path, checkpoint: &Path, out: &Path, cfg: &RunConfig) -> Result<ForecastResult> {
    let ck = load_checkpoint(checkpoint)?;
    let model: TSTransformer<f64> = ck.model()?;
    let mut cfg = cfg.clone();
    for key in RECORDED_KEYS {
        if !cfg.is_explicit(key) {
            if let Some(v) = ck.meta(key) {
                cfg.set(key, v)
                    .map_err(|e| CliError { kind: ExitKind::Corrupt, message: format!("checkpoint meta {key}: {e}") })?;
            }
        }
    }
    // channel selection follows the checkpoint so the model sees the columns it was trained on
    let names = &ck.stats.names;
    if names.is_empty() {
        return Err(CliError {
            kind: ExitKind::Corrupt,
            message: "checkpoint stores no channel names".into(),
        });
    }
    cfg.target_column = names[0].clone();
    cfg.covariates = Some(names[1..].to_vec());
    let (series, _) = load_series(data, &cfg)?;
    let f = forecast(&model, &ck.stats, &series, &cfg)?;
    write_text(out, &f.to_csv())?;
    Ok(f)
}

pub fn cmd_evaluate(forecast_path: &Path, out: &Path, plot_path: &Path, cfg: &RunConfig) -> Result<MetricsReport> {
    let text = fs::read_to_string(forecast_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", forecast_path.display())))?;
    let f = ForecastResult::from_csv(&text).map_err(|e| CliError::usage(format!("{}: {e}", forecast_path.display())))?;
    let thresholds = cfg.fault_thresholds().map_err(CliError::usage)?;
    let report = MetricsReport::evaluate(&f.time, &f.truth, &f.pred, &thresholds, cfg.origin())?;
    write_text(out, &report.to_csv())?;
    write_text(plot_path, &plot::render_svg(&f, &report, cfg.origin()))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagTable {
    pub windows: Vec<usize>,
    pub fractions: Vec<f64>,
    /// `lags[i][j]`: lag in hours for window `i` and threshold `j`.
    pub lags: Vec<Vec<Option<f64>>>,
}

impl LagTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window");
        for f in &self.fractions {
            out.push_str(&format!(",ft_{f}"));
        }
        out.push('\n');
        for (w, row) in self.windows.iter().zip(&self.lags) {
            out.push_str(&w.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.map_or_else(|| "NA".to_string(), |x| x.to_string()));
            }
            out.push('\n');
        }
        out
    }
}

/// Worker count from `TST_THREADS`, default 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var("TST_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!("TST_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn lag_row(series: &TimeSeries, cfg: &RunConfig, window: usize) -> Result<Vec<Option<f64>>> {
    let mut cfg = cfg.clone();
    cfg.lookback = window;
    let fitted = fit(series, &cfg)?;
    let f = forecast(&fitted.model, &fitted.stats, series, &cfg)?;
    let thresholds = cfg.fault_thresholds().map_err(CliError::usage)?;
    let report = MetricsReport::evaluate(&f.time, &f.truth, &f.pred, &thresholds, cfg.origin())?;
    Ok(report.lag_errors())
}

pub fn cmd_lag_scan(data: &Path, windows: &[usize], out: &Path, cfg: &RunConfig) -> Result<LagTable> {
    if windows.is_empty() {
        return Err(CliError::usage("lag-scan needs at least one window size"));
    }
    let thresholds = cfg.fault_thresholds().map_err(CliError::usage)?;
    let (series, _) = load_series(data, cfg)?;
    let threads = thread_count()?.min(windows.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<Option<f64>>>>>> = Mutex::new((0..windows.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= windows.len() {
                    break;
                }
                let row = lag_row(&series, cfg, windows[i]);
                results.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let mut lags = Vec::with_capacity(windows.len());
    for (w, r) in windows.iter().zip(results.into_inner().expect("no worker panicked")) {
        let row = r.expect("every window was scanned").map_err(|e| e.context(format!("lag-scan window {w}")))?;
        lags.push(row);
    }
    let table = LagTable {
        windows: windows.to_vec(),
        fractions: thresholds.fractions,
        lags,
    };
    write_text(out, &table.to_csv())?;
    Ok(table)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<TimeSeries> {
    let ts = synth_degradation(args.seed, args.hours, args.channels, &args.spec())?;
    write_csv(&ts, "time_h", None, &args.out)?;
    Ok(ts)
}
