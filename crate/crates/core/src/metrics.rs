//! Prognostic evaluation: RMSE, fault-threshold RUL extraction, percent
//! error, the asymmetric accuracy score, its mean and crossing lag.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} observations")]
    Length(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("true RUL must be positive, got {0}")]
    NonPositiveRul(f64),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DEFAULT_V0: f64 = 3.325;
pub const DEFAULT_LOSS_FRACTIONS: [f64; 5] = [0.035, 0.04, 0.045, 0.05, 0.055];

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty("rmse of no samples"));
    }
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Voltage-loss fault thresholds relative to an initial voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultThresholds {
    pub v0: f64,
    pub fractions: Vec<f64>,
}

impl Default for FaultThresholds {
    fn default() -> Self {
        Self {
            v0: DEFAULT_V0,
            fractions: DEFAULT_LOSS_FRACTIONS.to_vec(),
        }
    }
}

impl FaultThresholds {
    pub fn new(v0: f64, fractions: Vec<f64>) -> Result<Self> {
        let t = Self { v0, fractions };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v0 > 0.0 && self.v0.is_finite()) {
            return Err(MetricsError::Thresholds(format!("initial voltage must be positive, got {}", self.v0)));
        }
        if self.fractions.is_empty() {
            return Err(MetricsError::Thresholds("no loss fractions".into()));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(MetricsError::Thresholds("loss fractions must lie in (0, 1)".into()));
        }
        if self.fractions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MetricsError::Thresholds("loss fractions must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn voltage(&self, fraction: f64) -> f64 {
        self.v0 * (1.0 - fraction)
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.fractions.iter().map(|&f| self.voltage(f)).collect()
    }
}

/// First time at or after `origin` where `values` reaches `threshold`,
/// interpolated linearly between the bracketing samples.
pub fn crossing_time(time: &[f64], values: &[f64], threshold: f64, origin: f64) -> Option<f64> {
    let start = time.partition_point(|&t| t < origin);
    let mut prev: Option<(f64, f64)> = None;
    for i in start..time.len().min(values.len()) {
        let (t, v) = (time[i], values[i]);
        if v <= threshold {
            return Some(match prev {
                Some((t0, v0)) => t0 + (v0 - threshold) / (v0 - v) * (t - t0),
                None => t,
            });
        }
        prev = Some((t, v));
    }
    None
}

/// Remaining useful life from `origin` until `threshold`; `None` if never crossed.
pub fn threshold_crossing(time: &[f64], values: &[f64], threshold: f64, origin: f64) -> Option<f64> {
    crossing_time(time, values, threshold, origin).map(|t| t - origin)
}

/// Signed percent error, positive for an early prediction.
pub fn percent_error_ft(rul_true: f64, rul_pred: f64) -> Result<f64> {
    if !(rul_true > 0.0) {
        return Err(MetricsError::NonPositiveRul(rul_true));
    }
    Ok(100.0 * (rul_true - rul_pred) / rul_true)
}

/// Accuracy score: halves every 5 points of late error and every 20 of early error.
pub fn accuracy_ft(percent_error: f64) -> f64 {
    let half = 0.5f64.ln();
    if percent_error <= 0.0 {
        (-half * (percent_error / 5.0)).exp()
    } else {
        (half * (percent_error / 20.0)).exp()
    }
}

pub fn score_rul(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(MetricsError::Empty("no valid accuracies"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// `t*_true − t*_pred` at `threshold`: positive when the prediction is early.
pub fn lag_error(time: &[f64], pred: &[f64], truth: &[f64], threshold: f64, origin: f64) -> Option<f64> {
    let t_true = crossing_time(time, truth, threshold, origin)?;
    let t_pred = crossing_time(time, pred, threshold, origin)?;
    Some(t_true - t_pred)
}

/// Crossing-time lag over `levels` evenly spaced voltages spanning the
/// observed descent after `origin`: `(level, lag)` pairs where both cross.
pub fn lag_curve(time: &[f64], pred: &[f64], truth: &[f64], origin: f64, levels: usize) -> Vec<(f64, f64)> {
    let start = time.partition_point(|&t| t < origin);
    let seg = &truth[start.min(truth.len())..];
    if seg.len() < 2 || levels == 0 {
        return Vec::new();
    }
    let hi = seg[0];
    let lo = seg.iter().copied().fold(f64::INFINITY, f64::min);
    (1..=levels)
        .map(|k| hi - (hi - lo) * k as f64 / levels as f64)
        .filter_map(|level| lag_error(time, pred, truth, level, origin).map(|lag| (level, lag)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RulEstimate {
    pub fraction: f64,
    pub threshold_v: f64,
    pub rul_true: Option<f64>,
    pub rul_pred: Option<f64>,
    pub percent_error: Option<f64>,
    pub accuracy: Option<f64>,
}

impl RulEstimate {
    pub fn lag(&self) -> Option<f64> {
        // t*_true − t*_pred equals rul_true − rul_pred for a shared origin
        Some(self.rul_true? - self.rul_pred?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub estimates: Vec<RulEstimate>,
    pub score_rul: Option<f64>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn evaluate(time: &[f64], truth: &[f64], pred: &[f64], thresholds: &FaultThresholds, origin: f64) -> Result<Self> {
        if time.len() != truth.len() {
            return Err(MetricsError::Length(time.len(), truth.len()));
        }
        thresholds.validate()?;
        let rmse = rmse(pred, truth)?;
        let mut warnings = Vec::new();
        let mut estimates = Vec::new();
        for &fraction in &thresholds.fractions {
            let threshold_v = thresholds.voltage(fraction);
            let rul_true = threshold_crossing(time, truth, threshold_v, origin);
            let rul_pred = threshold_crossing(time, pred, threshold_v, origin);
            let percent_error = match (rul_true, rul_pred) {
                (Some(t), Some(p)) => match percent_error_ft(t, p) {
                    Ok(e) => Some(e),
                    Err(e) => {
                        warnings.push(format!("FT {}%: {e}; excluded from Score_RUL", fraction * 100.0));
                        None
                    }
                },
                (t, p) => {
                    let which = match (t, p) {
                        (None, None) => "neither series crosses",
                        (None, _) => "true series does not cross",
                        _ => "prediction does not cross",
                    };
                    warnings.push(format!(
                        "FT {}% ({threshold_v:.4} V): {which}; excluded from Score_RUL",
                        fraction * 100.0
                    ));
                    None
                }
            };
            estimates.push(RulEstimate {
                fraction,
                threshold_v,
                rul_true,
                rul_pred,
                percent_error,
                accuracy: percent_error.map(accuracy_ft),
            });
        }
        let valid: Vec<f64> = estimates.iter().filter_map(|e| e.accuracy).collect();
        let score_rul = score_rul(&valid).ok();
        if score_rul.is_some() && valid.len() < estimates.len() {
            warnings.push(format!(
                "Score_RUL averaged over {} of {} thresholds",
                valid.len(),
                estimates.len()
            ));
        }
        Ok(Self {
            rmse,
            estimates,
            score_rul,
            warnings,
        })
    }

    pub fn lag_errors(&self) -> Vec<Option<f64>> {
        self.estimates.iter().map(RulEstimate::lag).collect()
    }

    /// Per-threshold block followed by a summary block; `NA` marks values
    /// that do not exist.
    pub fn to_csv(&self) -> String {
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut out = String::from("ft,rul_true_h,rul_pred_h,pct_err_ft,a_ft,lag_h\n");
        for e in &self.estimates {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.fraction,
                na(e.rul_true),
                na(e.rul_pred),
                na(e.percent_error),
                na(e.accuracy),
                na(e.lag())
            );
        }
        let _ = writeln!(out, "rmse,score_rul\n{},{}", self.rmse, na(self.score_rul));
        out
    }
}
