//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and malformed values are rejected with the line
//! number. `--set key=value` flags are applied after the file and win.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use tst_core::data::CsvSchema;
use tst_core::metrics::FaultThresholds;
use tst_core::model::{AttentionMode, ModelConfig, ScaleRatio};
use tst_core::training::{CovariateMode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based line in the config file; `None` for command-line overrides.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.message),
            None => write!(f, "config override: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// One documented configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "data", default: "", help: "input CSV for train, predict and lag-scan" },
    KeyDoc { key: "out_dir", default: "out", help: "directory for report outputs" },
    KeyDoc { key: "time_column", default: "time_h", help: "time column in hours" },
    KeyDoc { key: "target_column", default: "Utot_V", help: "forecast target column" },
    KeyDoc { key: "covariates", default: "all", help: "comma-separated covariate columns, `all` or `none`" },
    KeyDoc { key: "interval", default: "0.1", help: "condensation bin width in hours" },
    KeyDoc { key: "ma_window", default: "15", help: "odd moving-average length in samples" },
    KeyDoc { key: "split_hours", default: "500", help: "train/test boundary in hours" },
    KeyDoc { key: "lookback", default: "32", help: "input window length T_w" },
    KeyDoc { key: "horizon", default: "8", help: "forecast horizon S" },
    KeyDoc { key: "width", default: "16", help: "token width D" },
    KeyDoc { key: "stages", default: "4", help: "stage count L; must match the ratio list" },
    KeyDoc { key: "ratios", default: "1,1/4,1/16,1/32", help: "per-stage key/value ratios" },
    KeyDoc { key: "heads", default: "1", help: "attention heads (must divide width)" },
    KeyDoc { key: "mode", default: "multi_scale", help: "multi_scale or vanilla" },
    KeyDoc { key: "instance_norm", default: "true", help: "per-window input standardization inside the model" },
    KeyDoc { key: "eps", default: "1e-5", help: "layer-norm epsilon" },
    KeyDoc { key: "lr", default: "0.001", help: "Adam learning rate" },
    KeyDoc { key: "epochs", default: "300", help: "training epochs" },
    KeyDoc { key: "batch", default: "64", help: "mini-batch size" },
    KeyDoc { key: "seed", default: "0", help: "initialization and shuffle seed" },
    KeyDoc { key: "clip_norm", default: "1", help: "global gradient-norm cap, 0 disables" },
    KeyDoc { key: "patience", default: "0", help: "early-stop patience in epochs, 0 disables" },
    KeyDoc { key: "loss_channels", default: "target", help: "target or all" },
    KeyDoc { key: "window_stride", default: "1", help: "stride between training windows" },
    KeyDoc { key: "forecast_step", default: "0", help: "rows kept per forecast step, 0 means the horizon" },
    KeyDoc { key: "covariate_mode", default: "oracle", help: "oracle or hold_last" },
    KeyDoc { key: "thresholds", default: "0.035,0.04,0.045,0.05,0.055", help: "fractional voltage-loss thresholds" },
    KeyDoc { key: "v0", default: "3.325", help: "initial voltage in volts" },
    KeyDoc { key: "origin_hours", default: "split", help: "RUL origin in hours, `split` uses split_hours" },
    KeyDoc { key: "lag_windows", default: "32,64,128,256", help: "lookbacks compared by lag-scan" },
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub time_column: String,
    pub target_column: String,
    pub covariates: Option<Vec<String>>,
    pub interval: f64,
    pub ma_window: usize,
    pub split_hours: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub width: usize,
    pub stages: usize,
    pub ratios: Vec<ScaleRatio>,
    pub heads: usize,
    pub mode: AttentionMode,
    pub instance_norm: bool,
    pub eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub patience: usize,
    pub all_channels_loss: bool,
    pub window_stride: usize,
    pub forecast_step: usize,
    pub covariate_mode: CovariateMode,
    pub thresholds: Vec<f64>,
    pub v0: f64,
    pub origin_hours: Option<f64>,
    pub lag_windows: Vec<usize>,
    /// Keys set by the file or an override rather than defaulted.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            data: None,
            out_dir: PathBuf::new(),
            time_column: String::new(),
            target_column: String::new(),
            covariates: None,
            interval: 0.0,
            ma_window: 0,
            split_hours: 0.0,
            lookback: 0,
            horizon: 0,
            width: 0,
            stages: 0,
            ratios: Vec::new(),
            heads: 0,
            mode: AttentionMode::MultiScale,
            instance_norm: true,
            eps: 0.0,
            lr: 0.0,
            epochs: 0,
            batch: 0,
            seed: 0,
            clip_norm: 0.0,
            patience: 0,
            all_channels_loss: false,
            window_stride: 0,
            forecast_step: 0,
            covariate_mode: CovariateMode::Oracle,
            thresholds: Vec::new(),
            v0: 0.0,
            origin_hours: None,
            lag_windows: Vec::new(),
            explicit: BTreeSet::new(),
        };
        for doc in KEYS {
            cfg.set(doc.key, doc.default).expect("documented defaults parse");
        }
        cfg.explicit.clear();
        cfg
    }
}

fn list<T>(value: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value.trim().parse().map_err(|_| format!("expected {what}, got {value:?}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError { line: Some(i + 1), message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let err = |message: String| ConfigError { line: None, message };
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {o:?}")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "time_column" => self.time_column = value.to_string(),
            "target_column" => self.target_column = value.to_string(),
            "covariates" => {
                self.covariates = match value {
                    "all" => None,
                    "none" => Some(Vec::new()),
                    v => Some(list(v, |s| Ok(s.to_string()))?),
                }
            }
            "interval" => self.interval = parse(value, "a number of hours")?,
            "ma_window" => self.ma_window = parse(value, "an odd window length")?,
            "split_hours" => self.split_hours = parse(value, "a number of hours")?,
            "lookback" => self.lookback = parse(value, "a positive count")?,
            "horizon" => self.horizon = parse(value, "a positive count")?,
            "width" => self.width = parse(value, "a positive count")?,
            "stages" => self.stages = parse(value, "a positive count")?,
            "ratios" => self.ratios = list(value, |s| s.parse::<ScaleRatio>().map_err(|e| e.to_string()))?,
            "heads" => self.heads = parse(value, "a positive count")?,
            "mode" => self.mode = value.parse().map_err(|e: tst_core::model::ModelError| e.to_string())?,
            "instance_norm" => self.instance_norm = parse(value, "true or false")?,
            "eps" => self.eps = parse(value, "a positive number")?,
            "lr" => self.lr = parse(value, "a positive number")?,
            "epochs" => self.epochs = parse(value, "a count")?,
            "batch" => self.batch = parse(value, "a positive count")?,
            "seed" => self.seed = parse(value, "an unsigned integer")?,
            "clip_norm" => self.clip_norm = parse(value, "a non-negative number")?,
            "patience" => self.patience = parse(value, "a count")?,
            "loss_channels" => {
                self.all_channels_loss = match value {
                    "target" => false,
                    "all" => true,
                    v => return Err(format!("expected target or all, got {v:?}")),
                }
            }
            "window_stride" => self.window_stride = parse(value, "a positive count")?,
            "forecast_step" => self.forecast_step = parse(value, "a count")?,
            "covariate_mode" => self.covariate_mode = value.parse()?,
            "thresholds" => self.thresholds = list(value, |s| parse(s, "a fraction"))?,
            "v0" => self.v0 = parse(value, "a voltage")?,
            "origin_hours" => {
                self.origin_hours = match value {
                    "split" => None,
                    v => Some(parse(v, "a number of hours or `split`")?),
                }
            }
            "lag_windows" => self.lag_windows = list(value, |s| parse(s, "a window length"))?,
            other => return Err(format!("unknown key `{other}`")),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            time_column: self.time_column.clone(),
            target_column: self.target_column.clone(),
            covariates: self.covariates.clone(),
        }
    }

    pub fn model_config(&self, n_variates: usize) -> Result<ModelConfig, String> {
        if self.stages != self.ratios.len() {
            return Err(format!(
                "stages = {} but {} ratios are configured",
                self.stages,
                self.ratios.len()
            ));
        }
        let cfg = ModelConfig {
            n_variates,
            lookback: self.lookback,
            horizon: self.horizon,
            width: self.width,
            ratios: self.ratios.clone(),
            heads: self.heads,
            mode: self.mode,
            eps: self.eps,
            instance_norm: self.instance_norm,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            clip_norm: self.clip_norm,
            patience: (self.patience > 0).then_some(self.patience),
            all_channels_loss: self.all_channels_loss,
            ..TrainConfig::default()
        }
    }

    pub fn fault_thresholds(&self) -> Result<FaultThresholds, String> {
        FaultThresholds::new(self.v0, self.thresholds.clone()).map_err(|e| e.to_string())
    }

    pub fn origin(&self) -> f64 {
        self.origin_hours.unwrap_or(self.split_hours)
    }

    pub fn step(&self) -> usize {
        if self.forecast_step == 0 {
            self.horizon
        } else {
            self.forecast_step
        }
    }
}
