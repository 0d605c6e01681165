use super::series::TimeSeries;
use super::{DataError, Result};

/// Per-channel z-score statistics fit on the training segment.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    /// Population standard deviation; constant channels hold 1.
    pub std: Vec<f64>,
    /// Channels whose standard deviation was zero.
    pub flagged: Vec<String>,
}

impl NormStats {
    pub fn fit(train: &TimeSeries) -> Result<Self> {
        if train.is_empty() {
            return Err(DataError::Empty("cannot fit normalization on an empty segment"));
        }
        let n = train.len() as f64;
        let mut mean = Vec::with_capacity(train.n_channels());
        let mut std = Vec::with_capacity(train.n_channels());
        let mut flagged = Vec::new();
        for c in 0..train.n_channels() {
            let x = train.channel(c);
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(mu);
            if sd > 0.0 {
                std.push(sd);
            } else {
                std.push(1.0);
                flagged.push(train.names()[c].clone());
            }
        }
        Ok(Self {
            names: train.names().to_vec(),
            mean,
            std,
            flagged,
        })
    }

    fn check(&self, ts: &TimeSeries) -> Result<()> {
        if ts.names() != self.names.as_slice() {
            return Err(DataError::Schema(format!(
                "normalization fit on {:?} applied to {:?}",
                self.names,
                ts.names()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, ts: &TimeSeries) -> Result<TimeSeries> {
        self.check(ts)?;
        let m = ts.n_channels();
        let v = ts.values().iter().enumerate().map(|(i, x)| (x - self.mean[i % m]) / self.std[i % m]);
        Ok(ts.with_values(v.collect()))
    }

    pub fn invert(&self, ts: &TimeSeries) -> Result<TimeSeries> {
        self.check(ts)?;
        let m = ts.n_channels();
        let v = ts.values().iter().enumerate().map(|(i, x)| x * self.std[i % m] + self.mean[i % m]);
        Ok(ts.with_values(v.collect()))
    }

    pub fn normalize_value(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize_value(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}
