//! Measurement routines shared by the property tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tst_core::model::{AttentionMode, ModelConfig, ModelError, ScaleRatio, TSTransformer};
use tst_core::tensor::{gradient_check, Tape, Tensor, TensorError, Var};

pub const GRAD_STEP: f64 = 1e-4;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// values in ±[0.2, 1.5], away from the ReLU kink
fn nonzero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Parameter(other.to_string()),
    }
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output element contributes a distinct gradient.
fn probe(tape: &mut Tape<f64>, out: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(out)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(17, |a, &d| a * 31 + d as u64));
    let w = rand_tensor(&shape, &mut rng, -1.0, 1.0);
    let weighted = tape.mul_const(out, &w)?;
    tape.sum(weighted)
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Builder)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let c34 = rand_tensor(&[3, 4], r, -1.0, 1.0);
    let c34b = c34.clone();
    let target = rand_tensor(&[2, 3, 4], r, -1.0, 1.0);
    vec![
        ("matmul", vec![rand_tensor(&[2, 3, 4], r, -1.0, 1.0), rand_tensor(&[4, 5], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o)
        })),
        ("matmul_batched", vec![rand_tensor(&[2, 3, 4], r, -1.0, 1.0), rand_tensor(&[2, 4, 2], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o)
        })),
        ("transpose", vec![rand_tensor(&[2, 3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.transpose(v[0])?;
            probe(t, o)
        })),
        ("affine", vec![rand_tensor(&[3, 4], r, -1.0, 1.0), rand_tensor(&[4, 6], r, -1.0, 1.0), rand_tensor(&[6], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.affine(v[0], v[1], v[2])?;
            probe(t, o)
        })),
        ("add", vec![rand_tensor(&[3, 4], r, -1.0, 1.0), rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.add(v[0], v[1])?;
            probe(t, o)
        })),
        ("sub", vec![rand_tensor(&[3, 4], r, -1.0, 1.0), rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.sub(v[0], v[1])?;
            probe(t, o)
        })),
        ("mul", vec![rand_tensor(&[3, 4], r, -1.0, 1.0), rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.mul(v[0], v[1])?;
            probe(t, o)
        })),
        ("add_bias", vec![rand_tensor(&[2, 3, 4], r, -1.0, 1.0), rand_tensor(&[4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.add_bias(v[0], v[1])?;
            probe(t, o)
        })),
        ("scale", vec![rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.scale(v[0], -0.7)?;
            probe(t, o)
        })),
        ("mul_const", vec![rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(move |t, v| {
            let o = t.mul_const(v[0], &c34)?;
            probe(t, o)
        })),
        ("add_const", vec![rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(move |t, v| {
            let o = t.add_const(v[0], &c34b)?;
            let o = t.square(o)?;
            probe(t, o)
        })),
        ("relu", vec![nonzero(&[3, 5], r)], Box::new(|t, v| {
            let o = t.relu(v[0])?;
            probe(t, o)
        })),
        ("square", vec![rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.square(v[0])?;
            probe(t, o)
        })),
        ("softmax_last", vec![rand_tensor(&[2, 3, 5], r, -2.0, 2.0)], Box::new(|t, v| {
            let o = t.softmax_last(v[0])?;
            probe(t, o)
        })),
        ("layer_norm", vec![rand_tensor(&[3, 6], r, -2.0, 2.0)], Box::new(|t, v| {
            let o = t.layer_norm(v[0], 1e-5)?;
            probe(t, o)
        })),
        ("depthwise_conv1d_r1", vec![rand_tensor(&[5, 4], r, -1.0, 1.0), rand_tensor(&[1, 4], r, -1.0, 1.0), rand_tensor(&[4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.depthwise_conv1d(v[0], v[1], v[2], 1)?;
            probe(t, o)
        })),
        // 7 tokens with stride 3: the last window repeats the final token
        ("depthwise_conv1d_r3", vec![rand_tensor(&[2, 7, 4], r, -1.0, 1.0), rand_tensor(&[3, 4], r, -1.0, 1.0), rand_tensor(&[4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.depthwise_conv1d(v[0], v[1], v[2], 3)?;
            probe(t, o)
        })),
        ("depthwise_conv1d_clamped", vec![rand_tensor(&[3, 4], r, -1.0, 1.0), rand_tensor(&[8, 4], r, -1.0, 1.0), rand_tensor(&[4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.depthwise_conv1d(v[0], v[1], v[2], 8)?;
            probe(t, o)
        })),
        ("slice_last", vec![rand_tensor(&[3, 6], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.slice_last(v[0], 2, 3)?;
            probe(t, o)
        })),
        ("concat_last", vec![rand_tensor(&[3, 2], r, -1.0, 1.0), rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.concat_last(&[v[0], v[1]])?;
            probe(t, o)
        })),
        ("select_row", vec![rand_tensor(&[2, 4, 3], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.select_row(v[0], 1)?;
            probe(t, o)
        })),
        ("sum", vec![rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.square(v[0])?;
            t.sum(o)
        })),
        ("mean", vec![rand_tensor(&[3, 4], r, -1.0, 1.0)], Box::new(|t, v| {
            let o = t.square(v[0])?;
            t.mean(o)
        })),
        ("mse", vec![rand_tensor(&[2, 3, 4], r, -1.0, 1.0)], Box::new(move |t, v| t.mse(v[0], &target))),
    ]
}

/// Worst relative error for every tape primitive.
pub fn primitive_gradients() -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .map(|(name, params, f)| {
            let report = gradient_check(&params, GRAD_STEP, |t, v| f(t, v)).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, report.max_rel_error)
        })
        .collect()
}

/// The toy configuration: M=6, T_w=32, D=16, four stages with the default ratios.
pub fn toy_config() -> ModelConfig {
    ModelConfig::new(6, 32, 2, 16)
}

/// Worst relative error over every parameter of one encoder stage (the
/// stage with reduction factor 4), with a random input as well.
pub fn block_gradient() -> f64 {
    let model = TSTransformer::<f64>::new(toy_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = rand_tensor(&[6, 16], &mut rng, -1.0, 1.0);
    let mut params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    params.push(tokens);
    let n = params.len() - 1;
    let report = gradient_check(&params, GRAD_STEP, |tape, vars| {
        let bound = model.bind_existing(&vars[..n]).map_err(model_err)?;
        let out = model.trm_block(tape, &bound, vars[n], 1).map_err(model_err)?;
        probe(tape, out)
    })
    .unwrap();
    report.max_rel_error
}

/// Worst relative error over every parameter of the full toy model.
pub fn model_gradient(seed: u64) -> f64 {
    let model = TSTransformer::<f64>::new(toy_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let window = rand_tensor(&[32, 6], &mut rng, -1.0, 1.0);
    let params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    let report = gradient_check(&params, GRAD_STEP, |tape, vars| {
        let bound = model.bind_existing(vars).map_err(model_err)?;
        let out = model.forward_taped(tape, &bound, &window).map_err(model_err)?;
        probe(tape, out)
    })
    .unwrap();
    report.max_rel_error
}

/// Plain-loop single-head attention of one stage read straight from the
/// stored weights: `(softmax(Q Kᵀ / √D) V) W_O + b_O` with
/// projections `X W + b`.
pub fn direct_attention(model: &TSTransformer<f64>, stage: usize, x: &[f64], n: usize) -> Vec<f64> {
    let d = model.config().width;
    let s = &model.stages[stage];
    let project = |w: &Tensor<f64>, b: &Tensor<f64>, input: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for o in 0..d {
                let mut acc = b.data()[o];
                for k in 0..d {
                    acc += input[i * d + k] * w.data()[k * d + o];
                }
                out[i * d + o] = acc;
            }
        }
        out
    };
    let q = project(&s.query.weight, &s.query.bias, x);
    let k = project(&s.key.weight, &s.key.bias, x);
    let v = project(&s.value.weight, &s.value.bias, x);
    let scale = 1.0 / (d as f64).sqrt();
    let mut mixed = vec![0.0; n * d];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale)
            .collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for c in 0..d {
                mixed[i * d + c] += e[j] / z * v[j * d + c];
            }
        }
    }
    project(&s.output.weight, &s.output.bias, &mixed)
}

fn tape_attention(model: &TSTransformer<f64>, stage: usize, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false).unwrap();
    let tokens = tape.constant(x.clone()).unwrap();
    let out = model.multi_scale_attention(&mut tape, &bound, tokens, stage).unwrap();
    tape.value(out).unwrap().clone()
}

/// Largest elementwise gap between multi-scale attention with every ratio
/// 1 (identity reducers) and the direct implementation, over `inputs`
/// random token matrices. Vanilla mode with the same weights is compared
/// as well.
pub fn vanilla_equivalence(inputs: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..inputs {
        let n = 1 + i % 12;
        let d = 8;
        let mut cfg = ModelConfig::new(n, 4, 1, d);
        cfg.ratios = vec![ScaleRatio::ONE; 2];
        let multi = TSTransformer::<f64>::new(cfg.clone(), i as u64).unwrap();
        for s in &multi.stages {
            let r = s.key_reducer.as_ref().expect("multi-scale stages carry reducers");
            assert!(r.factor == 1 && r.kernel.data().iter().all(|&k| k == 1.0) && r.bias.data().iter().all(|&b| b == 0.0));
        }
        let mut vanilla = TSTransformer::<f64>::new(ModelConfig { mode: AttentionMode::Vanilla, ..cfg }, i as u64).unwrap();
        for (v, m) in vanilla.stages.iter_mut().zip(&multi.stages) {
            v.query = m.query.clone();
            v.key = m.key.clone();
            v.value = m.value.clone();
            v.output = m.output.clone();
        }
        let x = rand_tensor(&[n, d], &mut rng, -2.0, 2.0);
        for stage in 0..2 {
            let direct = direct_attention(&multi, stage, x.data(), n);
            for got in [tape_attention(&multi, stage, &x), tape_attention(&vanilla, stage, &x)] {
                assert_eq!(got.shape(), &[n, d]);
                for (a, b) in got.data().iter().zip(&direct) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    worst
}

/// Checks stage output and K/V token counts for `N` in `1..=40` under the
/// four default ratios. Returns the number of checks made.
pub fn shape_clamp_suite() -> Result<usize, String> {
    let mut checks = 0;
    let d = 8;
    for n in 1..=40usize {
        let model = TSTransformer::<f64>::new(ModelConfig::new(n, 4, 2, d), n as u64).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let tokens = tape.constant(rand_tensor(&[n, d], &mut rng, -1.0, 1.0)).map_err(|e| e.to_string())?;
        for (stage, r) in [1usize, 4, 16, 32].into_iter().enumerate() {
            let expected = n.div_ceil(r).max(1);
            let (k, v) = model.reduce_kv(&mut tape, &bound, tokens, stage).map_err(|e| e.to_string())?;
            for (name, var) in [("K", k), ("V", v)] {
                let shape = tape.shape(var).map_err(|e| e.to_string())?;
                if shape != [expected, d] {
                    return Err(format!("N={n}, r={r}: {name} has shape {shape:?}, expected [{expected}, {d}]"));
                }
                checks += 1;
            }
            let out = model.trm_block(&mut tape, &bound, tokens, stage).map_err(|e| e.to_string())?;
            let shape = tape.shape(out).map_err(|e| e.to_string())?;
            if shape != [n, d] {
                return Err(format!("N={n}, r={r}: stage output has shape {shape:?}, expected [{n}, {d}]"));
            }
            checks += 1;
        }
        let window = rand_tensor(&[4, n], &mut rng, -1.0, 1.0);
        let out = model.forward(&window).map_err(|e| e.to_string())?;
        if out.shape() != [n, 2] {
            return Err(format!("N={n}: forecast has shape {:?}", out.shape()));
        }
        checks += 1;
    }
    Ok(checks)
}
