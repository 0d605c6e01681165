use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::series::TimeSeries;
use super::{DataError, Result};

/// Sliding `(lookback × channels, horizon)` pairs over one contiguous segment.
///
/// Windows are views into the owned series, so a dataset built from the
/// training segment can never reach across the split.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    series: TimeSeries,
    lookback: usize,
    horizon: usize,
    starts: Vec<usize>,
}

pub fn make_windows(ts: &TimeSeries, lookback: usize, horizon: usize, stride: usize) -> Result<WindowedDataset> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(DataError::Parameter(format!(
            "lookback, horizon and stride must be >= 1 (got {lookback}, {horizon}, {stride})"
        )));
    }
    let required = lookback + horizon;
    if ts.len() < required {
        return Err(DataError::TooShort { required, got: ts.len() });
    }
    let starts = (0..=ts.len() - required).step_by(stride).collect();
    Ok(WindowedDataset {
        series: ts.clone(),
        lookback,
        horizon,
        starts,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_channels(&self) -> usize {
        self.series.n_channels()
    }

    pub fn series(&self) -> &TimeSeries {
        &self.series
    }

    /// Row index of the first input step of window `i`.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    /// Row-major `lookback × channels` block.
    pub fn input(&self, i: usize) -> &[f64] {
        let s = self.starts[i];
        self.series.rows(s..s + self.lookback)
    }

    /// Next `horizon` values of the target channel.
    pub fn target(&self, i: usize) -> Vec<f64> {
        let c = self.series.target_index();
        (0..self.horizon).map(|k| self.future(i)[k * self.n_channels() + c]).collect()
    }

    /// Row-major `horizon × channels` block following the input.
    pub fn future(&self, i: usize) -> &[f64] {
        let s = self.starts[i] + self.lookback;
        self.series.rows(s..s + self.horizon)
    }

    pub fn target_times(&self, i: usize) -> &[f64] {
        let s = self.starts[i] + self.lookback;
        &self.series.time()[s..s + self.horizon]
    }

    /// Stacks the inputs of `indices` into `[B, lookback, channels]`.
    pub fn batch_inputs<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let data = indices.iter().flat_map(|&i| self.input(i)).map(|&v| T::lit(v)).collect();
        Tensor::new(vec![indices.len(), self.lookback, self.n_channels()], data)
            .map_err(|e| DataError::Parameter(e.to_string()))
    }

    /// Stacks the targets of `indices`: `[B, horizon]` for the target channel,
    /// or `[B, channels, horizon]` when `all_channels` is set.
    pub fn batch_targets<T: Scalar>(&self, indices: &[usize], all_channels: bool) -> Result<Tensor<T>> {
        let (m, s) = (self.n_channels(), self.horizon);
        let mut data = Vec::new();
        let shape = if all_channels {
            for &i in indices {
                let f = self.future(i);
                for c in 0..m {
                    data.extend((0..s).map(|k| T::lit(f[k * m + c])));
                }
            }
            vec![indices.len(), m, s]
        } else {
            for &i in indices {
                data.extend(self.target(i).into_iter().map(T::lit));
            }
            vec![indices.len(), s]
        };
        Tensor::new(shape, data).map_err(|e| DataError::Parameter(e.to_string()))
    }
}
