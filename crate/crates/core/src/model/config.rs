use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use super::ModelError;

/// Key/value down-sampling ratio of one stage, an exact rational in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleRatio(Ratio<u32>);

impl ScaleRatio {
    pub const ONE: ScaleRatio = ScaleRatio(Ratio::new_raw(1, 1));

    pub fn new(numer: u32, denom: u32) -> Result<Self, ModelError> {
        if numer == 0 || denom == 0 || numer > denom {
            return Err(ModelError::Config(format!(
                "scale ratio {numer}/{denom} must lie in (0, 1]"
            )));
        }
        Ok(Self(Ratio::new(numer, denom)))
    }

    /// `2^-exp`
    pub fn pow2_inv(exp: u32) -> Result<Self, ModelError> {
        let denom = 1u32
            .checked_shl(exp)
            .filter(|_| exp < 32)
            .ok_or_else(|| ModelError::Config(format!("2^-{exp} out of range")))?;
        Self::new(1, denom)
    }

    pub fn value(self) -> Ratio<u32> {
        self.0
    }

    /// Token-axis reduction factor `max(1, round(1/R))`.
    pub fn reduction_factor(self) -> usize {
        let inv = self.0.recip();
        let rounded = inv.round().to_integer();
        rounded.max(1) as usize
    }
}

impl fmt::Display for ScaleRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for ScaleRatio {
    type Err = ModelError;

    /// Accepts `1`, `1/4`, `2^-2` and decimal forms such as `0.25`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || ModelError::Config(format!("cannot parse scale ratio {s:?}"));
        if let Some(exp) = s.strip_prefix("2^-") {
            return Self::pow2_inv(exp.parse().map_err(|_| bad())?);
        }
        if let Some((n, d)) = s.split_once('/') {
            return Self::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        if let Ok(n) = s.parse::<u32>() {
            return Self::new(n, 1);
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(bad());
        }
        let approx = Ratio::<i64>::approximate_float(v).ok_or_else(bad)?;
        Self::new(
            u32::try_from(*approx.numer()).map_err(|_| bad())?,
            u32::try_from(*approx.denom()).map_err(|_| bad())?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Per-stage key/value reduction by strided depthwise convolution.
    MultiScale,
    /// Plain full attention at every stage (all reductions equal 1, no reducers).
    Vanilla,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MultiScale => "multi_scale",
            Self::Vanilla => "vanilla",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "multi_scale" | "multiscale" => Ok(Self::MultiScale),
            "vanilla" => Ok(Self::Vanilla),
            other => Err(ModelError::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. Parameter shapes are a pure function of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_variates: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub width: usize,
    /// One ratio per stage; the stage count is `ratios.len()`.
    pub ratios: Vec<ScaleRatio>,
    pub heads: usize,
    pub mode: AttentionMode,
    pub eps: f64,
    /// Per-window, per-variate standardization of the input; outputs are
    /// offsets from each variate's last value in units of the window scale.
    pub instance_norm: bool,
}

impl ModelConfig {
    pub fn default_ratios() -> Vec<ScaleRatio> {
        vec![
            ScaleRatio::ONE,
            ScaleRatio::pow2_inv(2).unwrap(),
            ScaleRatio::pow2_inv(4).unwrap(),
            ScaleRatio::pow2_inv(5).unwrap(),
        ]
    }

    pub fn new(n_variates: usize, lookback: usize, horizon: usize, width: usize) -> Self {
        Self {
            n_variates,
            lookback,
            horizon,
            width,
            ratios: Self::default_ratios(),
            heads: 1,
            mode: AttentionMode::MultiScale,
            eps: 1e-5,
            instance_norm: true,
        }
    }

    pub fn stages(&self) -> usize {
        self.ratios.len()
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Effective per-stage reduction factors (all 1 in vanilla mode).
    pub fn reduction_factors(&self) -> Vec<usize> {
        self.ratios
            .iter()
            .map(|r| match self.mode {
                AttentionMode::Vanilla => 1,
                AttentionMode::MultiScale => r.reduction_factor(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_variates == 0 || self.lookback == 0 || self.horizon == 0 || self.width == 0 {
            return fail(format!(
                "variates, lookback, horizon and width must be >= 1 (got {}, {}, {}, {})",
                self.n_variates, self.lookback, self.horizon, self.width
            ));
        }
        if self.ratios.is_empty() {
            return fail("at least one stage ratio is required".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    /// Closed-form scalar count of all learned parameters.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let linear = |i: usize, o: usize| i * o + o;
        let mut total = linear(self.lookback, d) + linear(d, self.horizon);
        for r in self.reduction_factors() {
            // q, k, v, output projection and the feed-forward layer
            total += 5 * linear(d, d);
            if self.mode == AttentionMode::MultiScale {
                total += 2 * (r * d + d);
            }
        }
        total
    }
}
