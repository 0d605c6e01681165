use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are kept in `f64`
/// whatever the parameter type.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update of every parameter from its gradient. `names` labels the
    /// parameters in diagnostics.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        let mut sq_norm = 0.0;
        for (i, (g, m)) in grads.iter().zip(&self.m).enumerate() {
            if g.len() != m.len() {
                return Err(TrainError::Config(format!("gradient of {} has wrong length", label(i))));
            }
            for &x in g.iter() {
                let x = x.to_f64_lossy();
                if !x.is_finite() {
                    return Err(TrainError::NonFiniteGradient { param: label(i) });
                }
                sq_norm += x * x;
            }
        }
        let c = self.config;
        let norm = sq_norm.sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps);
        let bc2 = 1.0 - c.beta2.powi(self.steps);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for k in 0..data.len() {
                let g = grads[i][k].to_f64_lossy() * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let update = c.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                data[k] = T::lit(data[k].to_f64_lossy() - update);
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteParameter { param: label(i) });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![x]).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut adam = Adam::new(&[3], AdamConfig {
            clip_norm: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut [&mut p], &[&[0.3, -40.0, 1e-3]], &[]).unwrap();
        let moved: Vec<f64> = p.data().iter().zip([1.0f64, -2.0, 0.5]).map(|(a, b)| (a - b).abs()).collect();
        for d in moved {
            assert!((d - 1e-3).abs() < 1e-5, "{d}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut x = scalar(5.0);
        let mut adam = Adam::new(&[1], AdamConfig {
            learning_rate: 0.1,
            clip_norm: 0.0,
            ..AdamConfig::default()
        });
        let mut reached = None;
        for step in 0..500 {
            let g = 2.0 * x.data()[0];
            adam.step(&mut [&mut x], &[&[g]], &[]).unwrap();
            if reached.is_none() && x.data()[0].abs() < 0.01 {
                reached = Some(step);
            }
        }
        assert!(reached.is_some(), "x = {}", x.data()[0]);
        assert!(x.data()[0].abs() < 0.01);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let mut adam = Adam::new(&[2], AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0]], &[]).unwrap();
        }
        assert_eq!(p.data(), &[0.25, -1.5]);
    }

    #[test]
    fn clipping_bounds_the_momentum_of_an_outlier() {
        // a huge gradient followed by a small opposite one: unclipped momentum
        // keeps moving down, clipped momentum turns around
        let run = |clip_norm: f64| {
            let mut x = scalar(0.0);
            let mut adam = Adam::new(&[1], AdamConfig {
                clip_norm,
                ..AdamConfig::default()
            });
            adam.step(&mut [&mut x], &[&[1e6]], &[]).unwrap();
            let after_first = x.data()[0];
            adam.step(&mut [&mut x], &[&[-1.0]], &[]).unwrap();
            x.data()[0] - after_first
        };
        assert!(run(0.0) < 0.0);
        assert!(run(1.0) > 0.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut adam = Adam::new(&[1], AdamConfig::default());
        let err = adam.step(&mut [&mut p], &[&[f64::NAN]], &["head.weight".into()]).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
    }
}
