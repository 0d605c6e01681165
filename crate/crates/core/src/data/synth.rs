use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::series::TimeSeries;
use super::{DataError, Result};

/// Covariate names in the order they are added, after the target `Utot_V`.
pub const COVARIATE_NAMES: [&str; 8] = [
    "I_A",
    "TinH2_C",
    "PinAIR_mbara",
    "DinH2_lmin",
    "HrAIRFC_pct",
    "ToutAIR_C",
    "PinH2_mbara",
    "DinAIR_lmin",
];

// (level, oscillation amplitude, period in hours) per covariate
const COVARIATE_SHAPE: [(f64, f64, f64); 8] = [
    (70.0, 0.6, 41.0),
    (20.0, 0.8, 67.0),
    (1450.0, 6.0, 53.0),
    (2.4, 0.05, 29.0),
    (50.0, 1.5, 83.0),
    (55.0, 0.7, 37.0),
    (1300.0, 5.0, 47.0),
    (36.0, 0.4, 61.0),
];

/// A partial voltage recovery: the stack jumps up by `amplitude` volts at
/// `at_fraction` of the run, then the gain decays with time constant `tau_hours`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    pub at_fraction: f64,
    pub amplitude: f64,
    pub tau_hours: f64,
}

/// Parameters of the synthetic stack-ageing generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub sample_interval_hours: f64,
    pub v0: f64,
    /// Linear voltage loss in V/h; `None` puts the 3.5% loss at 58% of the run.
    pub drift_per_hour: Option<f64>,
    pub recoveries: Vec<Recovery>,
    pub noise_std: f64,
    pub periodic_amplitude: f64,
    pub periodic_period_hours: f64,
    /// Scale of the random wander added to covariates; 0 leaves them smooth.
    pub covariate_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sample_interval_hours: 1.0 / 60.0,
            v0: 3.325,
            drift_per_hour: None,
            recoveries: vec![
                Recovery {
                    at_fraction: 0.15,
                    amplitude: 0.004,
                    tau_hours: 15.0,
                },
                Recovery {
                    at_fraction: 0.35,
                    amplitude: 0.003,
                    tau_hours: 15.0,
                },
            ],
            noise_std: 0.002,
            periodic_amplitude: 0.0005,
            periodic_period_hours: 30.0,
            covariate_noise: 1.0,
        }
    }
}

impl SynthSpec {
    /// Noise-free variant: Gaussian noise, the periodic term and covariate
    /// wander disabled, leaving drift plus recoveries.
    pub fn noise_free(mut self) -> Self {
        self.noise_std = 0.0;
        self.periodic_amplitude = 0.0;
        self.covariate_noise = 0.0;
        self
    }

    pub fn drift(&self, duration_hours: f64) -> f64 {
        self.drift_per_hour.unwrap_or(0.035 * self.v0 / (0.58 * duration_hours))
    }

    /// Noise-free target voltage at `t`.
    pub fn clean_target(&self, t: f64, duration_hours: f64) -> f64 {
        let mut v = self.v0 - self.drift(duration_hours) * t;
        for r in &self.recoveries {
            let t0 = r.at_fraction * duration_hours;
            if t >= t0 {
                v += r.amplitude * (-(t - t0) / r.tau_hours).exp();
            }
        }
        v + self.periodic_amplitude * (TAU * t / self.periodic_period_hours).sin()
    }

    /// First time in `[0, duration]` at which the clean target reaches
    /// `threshold`, located by a fine scan and refined by bisection.
    pub fn crossing_time(&self, threshold: f64, duration_hours: f64) -> Option<f64> {
        let f = |t: f64| self.clean_target(t, duration_hours) - threshold;
        if f(0.0) <= 0.0 {
            return Some(0.0);
        }
        let step = 1e-3;
        let n = (duration_hours / step).ceil() as usize;
        let mut lo = 0.0;
        for k in 1..=n {
            let hi = (k as f64 * step).min(duration_hours);
            if f(hi) <= 0.0 {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..80 {
                    let mid = 0.5 * (a + b);
                    if f(mid) <= 0.0 {
                        b = mid;
                    } else {
                        a = mid;
                    }
                }
                return Some(b);
            }
            lo = hi;
        }
        None
    }
}

/// Seeded synthetic degradation run with `n_channels` channels: the
/// target `Utot_V` followed by `n_channels - 1` covariates.
pub fn synth_degradation(seed: u64, duration_hours: f64, n_channels: usize, spec: &SynthSpec) -> Result<TimeSeries> {
    if !(duration_hours > 0.0 && duration_hours.is_finite()) {
        return Err(DataError::Parameter(format!("duration must be positive, got {duration_hours}")));
    }
    if !(spec.sample_interval_hours > 0.0) || spec.noise_std < 0.0 || spec.covariate_noise < 0.0 {
        return Err(DataError::Parameter("sample interval must be positive and noise scales non-negative".into()));
    }
    if n_channels == 0 || n_channels > COVARIATE_NAMES.len() + 1 {
        return Err(DataError::Parameter(format!(
            "channel count must be within 1..={}, got {n_channels}",
            COVARIATE_NAMES.len() + 1
        )));
    }
    let n = (duration_hours / spec.sample_interval_hours).round() as usize;
    let time: Vec<f64> = (0..n).map(|k| k as f64 * spec.sample_interval_hours).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let m = n_channels;
    let mut values = vec![0.0; n * m];
    for (k, &t) in time.iter().enumerate() {
        let e = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        values[k * m] = spec.clean_target(t, duration_hours) + e;
    }
    for c in 1..m {
        let (level, amp, period) = COVARIATE_SHAPE[c - 1];
        let phase = rng.random_range(0.0..TAU);
        // Ornstein-Uhlenbeck wander with a 5 h correlation time
        let theta = spec.sample_interval_hours / 5.0;
        let kick = (2.0 * theta).sqrt() * amp * 0.5 * spec.covariate_noise;
        let mut ou = 0.0;
        for (k, &t) in time.iter().enumerate() {
            if spec.covariate_noise > 0.0 {
                ou += -theta * ou + kick * unit.sample(&mut rng);
            }
            values[k * m + c] = level + amp * (TAU * t / period + phase).sin() + ou;
        }
    }
    let mut names = vec!["Utot_V".to_string()];
    names.extend(COVARIATE_NAMES[..m - 1].iter().map(|s| s.to_string()));
    TimeSeries::with_target_index(time, names, values, 0)
}
