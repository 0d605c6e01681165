use std::fmt;
use std::str::FromStr;

use crate::data::{NormStats, TimeSeries};
use crate::model::TSTransformer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Result, TrainError};

/// Source of covariate values inside autoregressive input windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateMode {
    /// Recorded test covariates (known future operating conditions).
    Oracle,
    /// Last covariate values observed before the forecast origin.
    HoldLast,
}

impl fmt::Display for CovariateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Oracle => "oracle",
            Self::HoldLast => "hold_last",
        })
    }
}

impl FromStr for CovariateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "oracle" => Ok(Self::Oracle),
            "hold_last" => Ok(Self::HoldLast),
            other => Err(format!("unknown covariate mode {other:?} (expected oracle or hold_last)")),
        }
    }
}

/// Aligned `(time, true, predicted)` target values in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub time: Vec<f64>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

impl ForecastResult {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_h,true_V,pred_V\n");
        for i in 0..self.len() {
            out.push_str(&format!("{},{},{}\n", self.time[i], self.truth[i], self.pred[i]));
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| e.to_string())?
            .iter()
            .map(str::to_string)
            .collect();
        if header != ["time_h", "true_V", "pred_V"] {
            return Err(format!("forecast header must be time_h,true_V,pred_V, got {}", header.join(",")));
        }
        let mut f = ForecastResult {
            time: Vec::new(),
            truth: Vec::new(),
            pred: Vec::new(),
        };
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| format!("forecast row {}: {e}", row + 1))?;
            let parse = |i: usize| -> std::result::Result<f64, String> {
                record
                    .get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("forecast row {}: column {} is not a finite number", row + 1, header[i]))
            };
            f.time.push(parse(0)?);
            f.truth.push(parse(1)?);
            f.pred.push(parse(2)?);
        }
        if f.time.windows(2).any(|w| w[1] <= w[0]) {
            return Err("forecast timestamps are not strictly increasing".into());
        }
        if f.is_empty() {
            return Err("forecast has no rows".into());
        }
        Ok(f)
    }
}

/// Iterative forecast over `test`, seeded with the last lookback rows of
/// `history`. Both series are normalized with `stats`; the result is in
/// physical units.
///
/// Each step predicts `horizon` values and keeps the first `step` of them.
/// Kept target predictions re-enter later windows; covariates follow `mode`.
pub fn rolling_forecast<T: Scalar>(
    model: &TSTransformer<T>,
    history: &TimeSeries,
    test: &TimeSeries,
    stats: &NormStats,
    step: usize,
    mode: CovariateMode,
) -> Result<ForecastResult> {
    let cfg = model.config();
    let (t_w, m) = (cfg.lookback, cfg.n_variates);
    if step == 0 || step > cfg.horizon {
        return Err(TrainError::Config(format!("forecast step must be within 1..={}, got {step}", cfg.horizon)));
    }
    if test.len() < step {
        return Err(TrainError::Config(format!("test segment of {} rows is shorter than one step of {step}", test.len())));
    }
    if history.len() < t_w {
        return Err(TrainError::Config(format!("{} history rows cannot seed a lookback of {t_w}", history.len())));
    }
    if history.n_channels() != m || test.names() != history.names() {
        return Err(TrainError::Config("history, test and model channels disagree".into()));
    }
    let target = test.target_index();
    let mut buffer: Vec<f64> = history.rows(history.len() - t_w..history.len()).to_vec();
    let held: Vec<f64> = history.row(history.len() - 1).to_vec();
    let mut pred_z = Vec::with_capacity(test.len());
    let mut i = 0;
    while i < test.len() {
        let window = &buffer[buffer.len() - t_w * m..];
        let x = Tensor::new(vec![t_w, m], window.iter().map(|&v| T::lit(v)).collect())?;
        let out = model.forward(&x)?;
        let keep = step.min(test.len() - i);
        for j in 0..keep {
            let y = out.data()[target * cfg.horizon + j].to_f64_lossy();
            if !y.is_finite() {
                return Err(TrainError::NonFiniteForecast(i + j));
            }
            let mut row = match mode {
                CovariateMode::Oracle => test.row(i + j).to_vec(),
                CovariateMode::HoldLast => held.clone(),
            };
            row[target] = y;
            buffer.extend_from_slice(&row);
            pred_z.push(y);
        }
        i += keep;
        // keep the buffer bounded
        if buffer.len() > 4 * t_w * m {
            buffer.drain(..buffer.len() - t_w * m);
        }
    }
    Ok(ForecastResult {
        time: test.time().to_vec(),
        truth: test.target_series().iter().map(|&z| stats.denormalize_value(target, z)).collect(),
        pred: pred_z.iter().map(|&z| stats.denormalize_value(target, z)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn series(n: usize, offset: usize) -> TimeSeries {
        let time = (offset..offset + n).map(|i| i as f64 * 0.1).collect();
        let values = (offset..offset + n)
            .flat_map(|i| [1.0 - 0.001 * i as f64, (0.05 * i as f64).sin()])
            .collect();
        TimeSeries::new(time, vec!["v".into(), "c".into()], values, "v").unwrap()
    }

    fn identity_stats(ts: &TimeSeries) -> NormStats {
        NormStats {
            names: ts.names().to_vec(),
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
            flagged: vec![],
        }
    }

    #[test]
    fn coverage_and_timestamps() {
        let (hist, test) = (series(50, 0), series(37, 50));
        let model = TSTransformer::<f64>::new(ModelConfig::new(2, 16, 3, 8), 1).unwrap();
        for step in 1..=3 {
            let f = rolling_forecast(&model, &hist, &test, &identity_stats(&hist), step, CovariateMode::Oracle).unwrap();
            assert_eq!(f.len(), 37);
            assert_eq!(f.time, test.time());
            assert_eq!(f.truth, test.target_series());
        }
        assert!(rolling_forecast(&model, &hist, &test, &identity_stats(&hist), 4, CovariateMode::Oracle).is_err());
        assert!(rolling_forecast(&model, &hist, &test.slice(0..2), &identity_stats(&hist), 3, CovariateMode::Oracle).is_err());
    }

    #[test]
    fn modes_differ_only_with_varying_covariates() {
        let hist = series(40, 0);
        let model = TSTransformer::<f64>::new(ModelConfig::new(2, 16, 1, 8), 2).unwrap();
        let run = |test: &TimeSeries, mode| rolling_forecast(&model, &hist, test, &identity_stats(&hist), 1, mode).unwrap();
        let varying = series(20, 40);
        assert_ne!(run(&varying, CovariateMode::Oracle), run(&varying, CovariateMode::HoldLast));
        // covariate frozen at the last observed value
        let last_c = hist.row(39)[1];
        let values = (0..20).flat_map(|i| [0.9 - 0.001 * i as f64, last_c]).collect();
        let time = (40..60).map(|i| i as f64 * 0.1).collect();
        let frozen = TimeSeries::new(time, vec!["v".into(), "c".into()], values, "v").unwrap();
        assert_eq!(run(&frozen, CovariateMode::Oracle).pred, run(&frozen, CovariateMode::HoldLast).pred);
    }

    #[test]
    fn csv_round_trip() {
        let f = ForecastResult {
            time: vec![500.05, 500.15],
            truth: vec![3.2, 3.199],
            pred: vec![3.21, 3.1985],
        };
        assert_eq!(ForecastResult::from_csv(&f.to_csv()).unwrap(), f);
        assert!(ForecastResult::from_csv("a,b,c\n1,2,3\n").is_err());
    }
}
