use std::ops::Range;

use super::{DataError, Result};

/// Time-stamped multivariate records: one row per timestep over a fixed set
/// of named channels, one of which is the forecast target.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    time: Vec<f64>,
    names: Vec<String>,
    /// Row-major `len × n_channels`.
    values: Vec<f64>,
    target: usize,
}

impl TimeSeries {
    pub fn new(time: Vec<f64>, names: Vec<String>, values: Vec<f64>, target: &str) -> Result<Self> {
        let target = names
            .iter()
            .position(|n| n == target)
            .ok_or_else(|| DataError::Schema(format!("target channel {target:?} not among {names:?}")))?;
        Self::with_target_index(time, names, values, target)
    }

    pub fn with_target_index(time: Vec<f64>, names: Vec<String>, values: Vec<f64>, target: usize) -> Result<Self> {
        if names.is_empty() || target >= names.len() {
            return Err(DataError::Schema("a series needs at least its target channel".into()));
        }
        if values.len() != time.len() * names.len() {
            return Err(DataError::Parameter(format!(
                "{} values do not fill {} rows of {} channels",
                values.len(),
                time.len(),
                names.len()
            )));
        }
        if let Some(i) = time.iter().chain(&values).position(|v| !v.is_finite()) {
            return Err(DataError::Parameter(format!("non-finite value at flat position {i}")));
        }
        if let Some(row) = first_non_increasing(&time) {
            return Err(DataError::NonMonotone { row });
        }
        Ok(Self {
            time,
            names,
            values,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn target_name(&self) -> &str {
        &self.names[self.target]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.n_channels();
        &self.values[t * m..(t + 1) * m]
    }

    /// Contiguous row-major block of rows `range`.
    pub fn rows(&self, range: Range<usize>) -> &[f64] {
        let m = self.n_channels();
        &self.values[range.start * m..range.end * m]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.n_channels()).copied().collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn target_series(&self) -> Vec<f64> {
        self.channel(self.target)
    }

    pub fn slice(&self, range: Range<usize>) -> TimeSeries {
        TimeSeries {
            time: self.time[range.clone()].to_vec(),
            names: self.names.clone(),
            values: self.rows(range).to_vec(),
            target: self.target,
        }
    }

    /// Same timestamps and channels with new values.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> TimeSeries {
        debug_assert_eq!(values.len(), self.values.len());
        TimeSeries {
            time: self.time.clone(),
            names: self.names.clone(),
            values,
            target: self.target,
        }
    }

    /// Builds a series from parts already known to satisfy the invariants.
    pub(crate) fn from_trusted(time: Vec<f64>, names: Vec<String>, values: Vec<f64>, target: usize) -> TimeSeries {
        debug_assert!(first_non_increasing(&time).is_none());
        TimeSeries {
            time,
            names,
            values,
            target,
        }
    }

    /// Appends `other`'s rows; both must share channels and `other` must
    /// start after the last timestamp of `self`.
    pub fn concat(&self, other: &TimeSeries) -> Result<TimeSeries> {
        if self.names != other.names || self.target != other.target {
            return Err(DataError::Schema("cannot join series with different channels".into()));
        }
        let mut time = self.time.clone();
        time.extend_from_slice(&other.time);
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::with_target_index(time, self.names.clone(), values, self.target)
    }
}

pub(crate) fn first_non_increasing(time: &[f64]) -> Option<usize> {
    time.windows(2).position(|w| w[1] <= w[0]).map(|i| i + 1)
}
