use super::series::TimeSeries;
use super::{DataError, Result};

/// Six-minute sampling grid.
pub const DEFAULT_INTERVAL_HOURS: f64 = 0.1;
pub const DEFAULT_MA_WINDOW: usize = 15;

// Absorbs representation error of grid timestamps such as 0.3 / 0.1.
const BIN_SLACK: f64 = 1e-9;

/// Comment line written on top of preprocessed CSV output.
pub fn preprocess_marker(interval_hours: f64, ma_window: usize) -> String {
    format!("#preprocessed interval={interval_hours}h ma={ma_window}")
}

/// Inverse of [`preprocess_marker`].
pub fn parse_marker(line: &str) -> Option<(f64, usize)> {
    let rest = line.trim().strip_prefix("#preprocessed")?;
    let mut interval = None;
    let mut ma = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("interval", v)) => interval = v.strip_suffix('h').unwrap_or(v).parse().ok(),
            Some(("ma", v)) => ma = v.parse().ok(),
            _ => {}
        }
    }
    Some((interval?, ma?))
}

/// Bin-mean resampling onto `interval_hours` bins `[kΔ, (k+1)Δ)`.
///
/// Each non-empty bin becomes one row stamped at its centre `(k + 0.5)Δ`.
/// Because centres fall in their own bin, condensing twice is a no-op.
pub fn condense(ts: &TimeSeries, interval_hours: f64) -> Result<TimeSeries> {
    if !(interval_hours > 0.0 && interval_hours.is_finite()) {
        return Err(DataError::Parameter(format!("interval must be positive, got {interval_hours}")));
    }
    if ts.is_empty() {
        return Err(DataError::Empty("nothing to condense"));
    }
    let m = ts.n_channels();
    let bin_of = |t: f64| (t / interval_hours + BIN_SLACK).floor() as i64;
    let mut time = Vec::new();
    let mut values = Vec::new();
    let mut start = 0;
    while start < ts.len() {
        let k = bin_of(ts.time()[start]);
        let mut end = start + 1;
        while end < ts.len() && bin_of(ts.time()[end]) == k {
            end += 1;
        }
        let n = (end - start) as f64;
        let mut sums = vec![0.0; m];
        for t in start..end {
            for (s, v) in sums.iter_mut().zip(ts.row(t)) {
                *s += v;
            }
        }
        time.push((k as f64 + 0.5) * interval_hours);
        values.extend(sums.into_iter().map(|s| s / n));
        start = end;
    }
    Ok(TimeSeries::from_trusted(time, ts.names().to_vec(), values, ts.target_index()))
}

/// Centred moving average of odd length `window`, per channel.
///
/// Near the ends the window shrinks symmetrically so every output stays
/// centred on its own sample: no phase lag and the length is preserved.
pub fn moving_average(ts: &TimeSeries, window: usize) -> Result<TimeSeries> {
    if window == 0 || window % 2 == 0 || window > ts.len() {
        return Err(DataError::Parameter(format!(
            "moving-average window must be odd and within 1..={}, got {window}",
            ts.len()
        )));
    }
    let (len, m) = (ts.len(), ts.n_channels());
    let half = window / 2;
    let mut out = vec![0.0; ts.values().len()];
    for i in 0..len {
        let h = half.min(i).min(len - 1 - i);
        let n = (2 * h + 1) as f64;
        for c in 0..m {
            let s: f64 = (i - h..=i + h).map(|t| ts.values()[t * m + c]).sum();
            out[i * m + c] = s / n;
        }
    }
    Ok(ts.with_values(out))
}

/// Splits into rows strictly before `boundary_hours` and the remainder.
pub fn split_at(ts: &TimeSeries, boundary_hours: f64) -> Result<(TimeSeries, TimeSeries)> {
    let cut = ts.time().partition_point(|&t| t < boundary_hours);
    if cut == 0 || cut == ts.len() {
        let (lo, hi) = match ts.time() {
            [] => (f64::NAN, f64::NAN),
            t => (t[0], t[t.len() - 1]),
        };
        return Err(DataError::Parameter(format!(
            "split at {boundary_hours} h leaves an empty segment (series spans {lo} to {hi} h)"
        )));
    }
    Ok((ts.slice(0..cut), ts.slice(cut..ts.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(time: Vec<f64>, v: Vec<f64>) -> TimeSeries {
        TimeSeries::new(time, vec!["v".into()], v, "v").unwrap()
    }

    #[test]
    fn one_hertz_hour_condenses_to_ten_points() {
        let time: Vec<f64> = (0..3600).map(|i| i as f64 / 3600.0).collect();
        let v: Vec<f64> = time.iter().map(|t| 3.3 - t).collect();
        let out = condense(&single(time, v), 0.1).unwrap();
        assert_eq!(out.len(), 10);
        for w in out.time().windows(2) {
            assert!((w[1] - w[0] - 0.1).abs() < 1e-9);
        }
        // bin mean of a linear ramp is its centre value
        assert!((out.target_series()[3] - (3.3 - 0.35)).abs() < 1e-3);
    }

    #[test]
    fn gridded_input_keeps_values() {
        let time: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let v: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let out = condense(&single(time, v.clone()), 0.1).unwrap();
        assert_eq!(out.target_series(), v);
    }

    #[test]
    fn empty_bins_are_skipped() {
        let out = condense(&single(vec![0.01, 0.02, 0.55], vec![1.0, 3.0, 7.0]), 0.1).unwrap();
        assert_eq!(out.target_series(), vec![2.0, 7.0]);
        assert!((out.time()[1] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn moving_average_examples() {
        let ts = single((0..5).map(f64::from).collect(), vec![0.0, 0.0, 3.0, 0.0, 0.0]);
        assert_eq!(moving_average(&ts, 3).unwrap().target_series(), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(moving_average(&ts, 1).unwrap(), ts);
        let flat = single((0..40).map(f64::from).collect(), vec![3.325; 40]);
        for v in moving_average(&flat, 15).unwrap().target_series() {
            assert!((v - 3.325).abs() < 1e-12);
        }
        for bad in [0, 2, 7] {
            assert!(matches!(moving_average(&ts, bad), Err(DataError::Parameter(_))), "{bad}");
        }
    }

    #[test]
    fn moving_average_keeps_mean_of_noisy_constant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let v: Vec<f64> = (0..n).map(|_| 2.0 + rng.random_range(-0.5..0.5)).collect();
        let ts = single((0..n).map(|i| i as f64).collect(), v);
        let out = moving_average(&ts, 15).unwrap().target_series();
        let mean = out.iter().sum::<f64>() / n as f64;
        assert_eq!(out.len(), n);
        assert!((mean - 2.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn split_partitions() {
        let time: Vec<f64> = (0..=10200).map(|i| i as f64 * 0.1).collect();
        let ts = single(time.clone(), vec![1.0; time.len()]);
        let (train, test) = split_at(&ts, 500.0).unwrap();
        assert_eq!(train.len() + test.len(), ts.len());
        assert!(*train.time().last().unwrap() < 500.0);
        assert!(test.time()[0] >= 500.0);
        assert!(split_at(&ts, 0.0).is_err());
        assert!(split_at(&ts, 2000.0).is_err());
    }

    #[test]
    fn marker_round_trip() {
        let m = preprocess_marker(0.1, 15);
        assert_eq!(m, "#preprocessed interval=0.1h ma=15");
        assert_eq!(parse_marker(&m), Some((0.1, 15)));
        assert_eq!(parse_marker("# something else"), None);
    }

    proptest! {
        #[test]
        fn condense_is_idempotent(gaps in prop::collection::vec(0.001f64..0.3, 1..200), interval in 0.05f64..0.5) {
            let mut t = 0.0;
            let time: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
            let v: Vec<f64> = time.iter().map(|x| x.cos()).collect();
            let once = condense(&single(time, v), interval).unwrap();
            let twice = condense(&once, interval).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.time().windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn moving_average_preserves_length_and_order(v in prop::collection::vec(-5.0f64..5.0, 1..120), half in 0usize..10) {
            let w = (2 * half + 1).min(if v.len() % 2 == 1 { v.len() } else { v.len() - 1 });
            let ts = single((0..v.len()).map(|i| i as f64).collect(), v);
            let out = moving_average(&ts, w).unwrap();
            prop_assert_eq!(out.len(), ts.len());
            prop_assert_eq!(out.time(), ts.time());
        }
    }
}
