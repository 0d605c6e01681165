//! The temporal scale transformer.
//!
//! Each variate's whole lookback series is embedded as one token. A stack of
//! post-norm encoder stages follows; stage `i` computes attention with
//! unreduced queries against keys and values whose token axis has been
//! shrunk by a factor `rᵢ` through strided depthwise convolutions. A shared
//! linear head maps every final token to that variate's horizon.

mod config;

pub use config::{AttentionMode, ModelConfig, ScaleRatio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stage index {stage} out of range for {stages} stages")]
    Stage { stage: usize, stages: usize },
    #[error("parameter payload holds {got} scalars, configuration requires {expected}")]
    ParamCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Variance floor of the input standardization, in units of the globally
/// z-scored data. Slowly drifting windows have a variance well below it, so
/// their scale sits near `sqrt(eps)` and does not track window noise.
pub const INSTANCE_NORM_EPS: f64 = 1e-2;

/// Weight `[in, out]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
        };
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], draw(fan_in * fan_out)),
            bias: Tensor::from_parts(vec![fan_out], draw(fan_out)),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], vec![T::zero(); fan_in * fan_out]),
            bias: Tensor::from_parts(vec![fan_out], vec![T::zero(); fan_out]),
        }
    }
}

/// Depthwise kernel `[r, D]` and bias `[D]` applied with stride `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reducer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub factor: usize,
}

impl<T: Scalar> Reducer<T> {
    /// Averaging kernel: every tap `1/r`, zero bias.
    pub fn averaging(factor: usize, width: usize) -> Self {
        let tap = T::one() / T::from_usize(factor).unwrap();
        Self {
            kernel: Tensor::from_parts(vec![factor, width], vec![tap; factor * width]),
            bias: Tensor::from_parts(vec![width], vec![T::zero(); width]),
            factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub key_reducer: Option<Reducer<T>>,
    pub value_reducer: Option<Reducer<T>>,
    pub output: Linear<T>,
    pub ffn: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TSTransformer<T> {
    config: ModelConfig,
    pub embedding: Linear<T>,
    pub stages: Vec<Stage<T>>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
struct LinearVars {
    w: Var,
    b: Var,
}

#[derive(Debug, Clone, Copy)]
struct ReducerVars {
    kernel: Var,
    bias: Var,
    factor: usize,
}

#[derive(Debug, Clone)]
struct StageVars {
    query: LinearVars,
    key: LinearVars,
    value: LinearVars,
    key_reducer: Option<ReducerVars>,
    value_reducer: Option<ReducerVars>,
    output: LinearVars,
    ffn: LinearVars,
}

/// The model's parameters recorded as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    embedding: LinearVars,
    stages: Vec<StageVars>,
    head: LinearVars,
    ordered: Vec<Var>,
}

impl BoundParams {
    /// Leaves in declared parameter order (same order as
    /// [`TSTransformer::parameters`]).
    pub fn vars(&self) -> &[Var] {
        &self.ordered
    }
}

enum Binder<'t, T> {
    Fresh {
        tape: &'t mut Tape<T>,
        requires_grad: bool,
        ordered: Vec<Var>,
    },
    Existing {
        vars: std::slice::Iter<'t, Var>,
        ordered: Vec<Var>,
    },
}

impl<T: Scalar> Binder<'_, T> {
    fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        let v = match self {
            Binder::Fresh { tape, requires_grad, .. } => tape.leaf(t.clone(), *requires_grad)?,
            Binder::Existing { vars, .. } => *vars.next().ok_or_else(|| {
                ModelError::Config("fewer parameter leaves than model tensors".into())
            })?,
        };
        match self {
            Binder::Fresh { ordered, .. } | Binder::Existing { ordered, .. } => ordered.push(v),
        }
        Ok(v)
    }

    fn into_ordered(self) -> Vec<Var> {
        match self {
            Binder::Fresh { ordered, .. } | Binder::Existing { ordered, .. } => ordered,
        }
    }

    fn linear(&mut self, l: &Linear<T>) -> Result<LinearVars> {
        Ok(LinearVars {
            w: self.leaf(&l.weight)?,
            b: self.leaf(&l.bias)?,
        })
    }

    fn reducer(&mut self, r: &Reducer<T>) -> Result<ReducerVars> {
        Ok(ReducerVars {
            kernel: self.leaf(&r.kernel)?,
            bias: self.leaf(&r.bias)?,
            factor: r.factor,
        })
    }
}

impl<T: Scalar> TSTransformer<T> {
    /// Randomly initialized model: affine weights and biases uniform in
    /// `±√(1/fan_in)`, reducers set to the averaging kernel.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let embedding = Linear::uniform(&mut rng, config.lookback, d);
        let stages = config
            .reduction_factors()
            .into_iter()
            .map(|r| {
                let multi = config.mode == AttentionMode::MultiScale;
                Stage {
                    query: Linear::uniform(&mut rng, d, d),
                    key: Linear::uniform(&mut rng, d, d),
                    value: Linear::uniform(&mut rng, d, d),
                    key_reducer: multi.then(|| Reducer::averaging(r, d)),
                    value_reducer: multi.then(|| Reducer::averaging(r, d)),
                    output: Linear::uniform(&mut rng, d, d),
                    ffn: Linear::uniform(&mut rng, d, d),
                }
            })
            .collect();
        let head = Linear::uniform(&mut rng, d, config.horizon);
        Ok(Self {
            config,
            embedding,
            stages,
            head,
        })
    }

    /// Model with every parameter zero except averaging reducers.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let multi = config.mode == AttentionMode::MultiScale;
        let stages = config
            .reduction_factors()
            .into_iter()
            .map(|r| Stage {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                key_reducer: multi.then(|| Reducer::averaging(r, d)),
                value_reducer: multi.then(|| Reducer::averaging(r, d)),
                output: Linear::zeros(d, d),
                ffn: Linear::zeros(d, d),
            })
            .collect();
        Ok(Self {
            embedding: Linear::zeros(config.lookback, d),
            head: Linear::zeros(d, config.horizon),
            stages,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All learned tensors with their names, in declared order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("embedding.weight".into(), &self.embedding.weight));
        out.push(("embedding.bias".into(), &self.embedding.bias));
        for (i, s) in self.stages.iter().enumerate() {
            for (name, l) in [("query", &s.query), ("key", &s.key), ("value", &s.value)] {
                out.push((format!("stage{i}.{name}.weight"), &l.weight));
                out.push((format!("stage{i}.{name}.bias"), &l.bias));
            }
            for (name, r) in [("key_reducer", &s.key_reducer), ("value_reducer", &s.value_reducer)] {
                if let Some(r) = r {
                    out.push((format!("stage{i}.{name}.kernel"), &r.kernel));
                    out.push((format!("stage{i}.{name}.bias"), &r.bias));
                }
            }
            for (name, l) in [("output", &s.output), ("ffn", &s.ffn)] {
                out.push((format!("stage{i}.{name}.weight"), &l.weight));
                out.push((format!("stage{i}.{name}.bias"), &l.bias));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable access in the same order as [`Self::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.embedding.weight, &mut self.embedding.bias];
        for s in &mut self.stages {
            out.extend([&mut s.query.weight, &mut s.query.bias]);
            out.extend([&mut s.key.weight, &mut s.key.bias]);
            out.extend([&mut s.value.weight, &mut s.value.bias]);
            if let Some(r) = &mut s.key_reducer {
                out.extend([&mut r.kernel, &mut r.bias]);
            }
            if let Some(r) = &mut s.value_reducer {
                out.extend([&mut r.kernel, &mut r.bias]);
            }
            out.extend([&mut s.output.weight, &mut s.output.bias]);
            out.extend([&mut s.ffn.weight, &mut s.ffn.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flat copy of all parameters in declared order.
    pub fn flat_parameters(&self) -> Vec<T> {
        self.parameters()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Overwrites every parameter from a flat payload in declared order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.parameters_mut() {
            let n = t.len();
            let chunk = flat[offset..offset + n].to_vec();
            *t = Tensor::new(t.shape().to_vec(), chunk)?;
            offset += n;
        }
        Ok(())
    }

    /// Records all parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<BoundParams> {
        self.bind_with(Binder::Fresh {
            tape,
            requires_grad,
            ordered: Vec::new(),
        })
    }

    /// Reuses leaves already on a tape, given in declared parameter order.
    /// Shapes are checked lazily by the primitives that consume them.
    pub fn bind_existing(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.parameters().len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter leaves, got {}",
                self.parameters().len(),
                vars.len()
            )));
        }
        self.bind_with(Binder::Existing {
            vars: vars.iter(),
            ordered: Vec::new(),
        })
    }

    fn bind_with(&self, mut binder: Binder<'_, T>) -> Result<BoundParams> {
        let embedding = binder.linear(&self.embedding)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let query = binder.linear(&s.query)?;
            let key = binder.linear(&s.key)?;
            let value = binder.linear(&s.value)?;
            let key_reducer = s.key_reducer.as_ref().map(|r| binder.reducer(r)).transpose()?;
            let value_reducer = s.value_reducer.as_ref().map(|r| binder.reducer(r)).transpose()?;
            let output = binder.linear(&s.output)?;
            let ffn = binder.linear(&s.ffn)?;
            stages.push(StageVars {
                query,
                key,
                value,
                key_reducer,
                value_reducer,
                output,
                ffn,
            });
        }
        let head = binder.linear(&self.head)?;
        Ok(BoundParams {
            embedding,
            stages,
            head,
            ordered: binder.into_ordered(),
        })
    }

    fn stage_vars<'a>(&self, bound: &'a BoundParams, stage: usize) -> Result<&'a StageVars> {
        bound.stages.get(stage).ok_or(ModelError::Stage {
            stage,
            stages: self.stages.len(),
        })
    }

    fn check_window(&self, shape: &[usize]) -> Result<()> {
        let nd = shape.len();
        if nd < 2 || shape[nd - 2] != self.config.lookback || shape[nd - 1] != self.config.n_variates {
            return Err(TensorError::Dimension {
                op: "window",
                lhs: shape.to_vec(),
                rhs: vec![self.config.lookback, self.config.n_variates],
            }
            .into());
        }
        Ok(())
    }

    /// Inverted embedding: window `[.., T_w, M]` to tokens `[.., M, D]`,
    /// row `f` being the shared affine image of variate `f`'s series.
    pub fn embed(&self, tape: &mut Tape<T>, bound: &BoundParams, window: Var) -> Result<Var> {
        self.check_window(tape.shape(window)?)?;
        let series = tape.transpose(window)?;
        Ok(tape.affine(series, bound.embedding.w, bound.embedding.b)?)
    }

    /// Key and value projections of `tokens: [.., N, D]`, each shrunk along
    /// the token axis by the stage's reduction factor.
    pub fn reduce_kv(&self, tape: &mut Tape<T>, bound: &BoundParams, tokens: Var, stage: usize) -> Result<(Var, Var)> {
        let sv = self.stage_vars(bound, stage)?;
        let mut k = tape.affine(tokens, sv.key.w, sv.key.b)?;
        let mut v = tape.affine(tokens, sv.value.w, sv.value.b)?;
        if let Some(r) = sv.key_reducer {
            k = tape.depthwise_conv1d(k, r.kernel, r.bias, r.factor)?;
        }
        if let Some(r) = sv.value_reducer {
            v = tape.depthwise_conv1d(v, r.kernel, r.bias, r.factor)?;
        }
        Ok((k, v))
    }

    /// `softmax(Q Kᵢᵀ / √d_k) Vᵢ` per head with unreduced queries, heads
    /// concatenated and passed through the output projection. Output keeps
    /// the input's `N` tokens.
    pub fn multi_scale_attention(&self, tape: &mut Tape<T>, bound: &BoundParams, tokens: Var, stage: usize) -> Result<Var> {
        let sv = self.stage_vars(bound, stage)?.clone();
        let q = tape.affine(tokens, sv.query.w, sv.query.b)?;
        let (k, v) = self.reduce_kv(tape, bound, tokens, stage)?;
        let heads = self.config.heads;
        let dk = self.config.head_width();
        let inv_sqrt = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_last(q, h * dk, dk)?,
                    tape.slice_last(k, h * dk, dk)?,
                    tape.slice_last(v, h * dk, dk)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let weights = tape.softmax_last(scores)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_last(&outs)? };
        Ok(tape.affine(merged, sv.output.w, sv.output.b)?)
    }

    /// One post-norm encoder stage:
    /// `O = LN(X + attn(X))`, then `LN(O + ReLU(O W¹ + b¹))`.
    pub fn trm_block(&self, tape: &mut Tape<T>, bound: &BoundParams, tokens: Var, stage: usize) -> Result<Var> {
        let eps = T::lit(self.config.eps);
        let attn = self.multi_scale_attention(tape, bound, tokens, stage)?;
        let o = tape.add(tokens, attn)?;
        let o = tape.layer_norm(o, eps)?;
        let sv = self.stage_vars(bound, stage)?;
        let f = tape.affine(o, sv.ffn.w, sv.ffn.b)?;
        let f = tape.relu(f)?;
        let o2 = tape.add(o, f)?;
        Ok(tape.layer_norm(o2, eps)?)
    }

    /// Full forward pass on windows `[.., T_w, M]`, returning `[.., M, S]`.
    ///
    /// With instance normalization enabled each variate's window is
    /// standardized before embedding. The forecast is read as an offset from
    /// the variate's last observed value in units of the window scale.
    pub fn forward_taped(&self, tape: &mut Tape<T>, bound: &BoundParams, windows: &Tensor<T>) -> Result<Var> {
        self.check_window(windows.shape())?;
        let (input, stats) = if self.config.instance_norm {
            let (x, s) = instance_normalize(windows, T::lit(INSTANCE_NORM_EPS));
            (x, Some(s))
        } else {
            (windows.clone(), None)
        };
        let window = tape.constant(input)?;
        let mut z = self.embed(tape, bound, window)?;
        for stage in 0..self.stages.len() {
            z = self.trm_block(tape, bound, z, stage)?;
        }
        let mut out = tape.affine(z, bound.head.w, bound.head.b)?;
        if let Some((anchor, scale)) = stats {
            let shape = tape.shape(out)?.to_vec();
            let s = self.config.horizon;
            let expand = |v: &[T]| -> Tensor<T> {
                Tensor::from_parts(shape.clone(), v.iter().flat_map(|&x| std::iter::repeat_n(x, s)).collect())
            };
            out = tape.mul_const(out, &expand(&scale))?;
            out = tape.add_const(out, &expand(&anchor))?;
        }
        Ok(out)
    }

    /// Inference on one window `[T_w, M]` (or a batch `[B, T_w, M]`).
    pub fn forward(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let out = self.forward_taped(&mut tape, &bound, window)?;
        Ok(tape.value(out)?.clone())
    }
}

/// Per `(window, variate)` mean and `√(var + eps)` over the lookback axis of
/// `[.., T_w, M]`. Returns the standardized windows plus `(last, scale)`
/// laid out as `[.., M]`, where `last` is the final raw value of each variate.
fn instance_normalize<T: Scalar>(windows: &Tensor<T>, eps: T) -> (Tensor<T>, (Vec<T>, Vec<T>)) {
    let nd = windows.shape().len();
    let (t_w, m) = (windows.shape()[nd - 2], windows.shape()[nd - 1]);
    let batch = windows.len() / (t_w * m);
    let tf = T::from_usize(t_w).unwrap();
    let mut data = windows.data().to_vec();
    let mut lasts = Vec::with_capacity(batch * m);
    let mut scales = Vec::with_capacity(batch * m);
    for b in 0..batch {
        let w = &mut data[b * t_w * m..(b + 1) * t_w * m];
        for f in 0..m {
            let mean = (0..t_w).map(|t| w[t * m + f]).sum::<T>() / tf;
            let var = (0..t_w).map(|t| (w[t * m + f] - mean).powi(2)).sum::<T>() / tf;
            let scale = (var + eps).sqrt();
            lasts.push(w[(t_w - 1) * m + f]);
            for t in 0..t_w {
                w[t * m + f] = (w[t * m + f] - mean) / scale;
            }
            scales.push(scale);
        }
    }
    (Tensor::from_parts(windows.shape().to_vec(), data), (lasts, scales))
}
