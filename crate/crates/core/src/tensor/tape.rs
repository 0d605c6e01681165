use super::{first_non_finite, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Affine { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Scale { x: Var, factor: T },
    MulConst { x: Var, c: Vec<T> },
    AddConst { x: Var },
    Relu { x: Var },
    Square { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, sigma: Vec<T>, denom: Vec<T> },
    DepthwiseConv { x: Var, kernel: Var, bias: Var, r: usize },
    SliceLast { x: Var, start: usize },
    ConcatLast { parts: Vec<Var> },
    SelectRow { x: Var, row: usize },
    Sum { x: Var },
    Mean { x: Var },
    Mse { pred: Var, target: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
///
/// Every primitive evaluates eagerly, stores its output and whatever it needs
/// for the gradient, and returns a [`Var`]. [`Tape::backward`] visits nodes in
/// exact reverse execution order, accumulating gradients additively, then
/// drops all intermediates. Leaf gradients stay readable through
/// [`Tape::grad`]; any further use of the tape is an error.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

fn split_last2(shape: &[usize]) -> (usize, usize, usize) {
    let nd = shape.len();
    let batch = shape[..nd - 2].iter().product();
    (batch, shape[nd - 2], shape[nd - 1])
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / n, n)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v)?.value.as_ref().ok_or(TensorError::TapeConsumed)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    /// Gradient of the last backward pass with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.check_open()?;
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, context: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) {
            if let Some(index) = first_non_finite(value.data()) {
                return Err(TensorError::NonFinite { context, index });
            }
        }
        let requires_grad = inputs
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn values2(&self, a: Var, b: Var) -> Result<(&Tensor<T>, &Tensor<T>)> {
        Ok((self.value(a)?, self.value(b)?))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = self.values2(a, b)?;
        if ta.shape() != tb.shape() {
            return Err(TensorError::Dimension {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or a batch
    /// `[.., k, n]` with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (ta, tb) = self.values2(a, b)?;
        let mismatch = || TensorError::Dimension {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.shape().len() < 2 || tb.shape().len() < 2 {
            return Err(mismatch());
        }
        let (batch, m, k) = split_last2(ta.shape());
        let (bb, kb, n) = split_last2(tb.shape());
        let shared = tb.shape().len() == 2;
        if kb != k || (!shared && ta.shape()[..ta.shape().len() - 2] != tb.shape()[..tb.shape().len() - 2]) {
            return Err(mismatch());
        }
        debug_assert!(shared || bb == batch);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            gemm_acc(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let t = self.value(x)?.transpose_last2()?;
        self.push("transpose", t, Op::Transpose { x }, &[x])
    }

    /// `x·W + b` with `x: [.., k]`, `W: [k, n]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (tx, tw) = self.values2(x, w)?;
        let tb = self.value(b)?;
        let (rows, k) = rows_of(tx.shape());
        if tw.shape().len() != 2 || tw.shape()[0] != k {
            return Err(TensorError::Dimension {
                op: "affine",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let n = tw.shape()[1];
        if tb.shape() != [n] {
            return Err(TensorError::Dimension {
                op: "affine bias",
                lhs: tw.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(tb.data());
        }
        gemm_acc(tx.data(), tw.data(), &mut out, rows, k, n);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("affine", Tensor::from_parts(shape, out), Op::Affine { x, w, b }, &[x, w, b])
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check_open()?;
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = self.values2(a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(op_name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a `[n]` vector to every last-axis slice of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (tx, tb) = self.values2(x, b)?;
        let n = tx.last_dim();
        if tb.shape() != [n] {
            return Err(TensorError::Dimension {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = tx
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_bias", t, Op::AddBias { x, b }, &[x, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.check_open()?;
        let t = self.value(x)?.map(|v| v * factor);
        self.push("scale", t, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise product with a non-differentiable tensor of equal shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x)?;
        if tx.shape() != c.shape() {
            return Err(TensorError::Dimension {
                op: "mul_const",
                lhs: tx.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = tx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("mul_const", t, Op::MulConst { x, c: c.data().to_vec() }, &[x])
    }

    /// Elementwise sum with a non-differentiable tensor of equal shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x)?;
        if tx.shape() != c.shape() {
            return Err(TensorError::Dimension {
                op: "add_const",
                lhs: tx.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = tx.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_const", t, Op::AddConst { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let t = self.value(x)?.map(|v| v.max(T::zero()));
        self.push("relu", t, Op::Relu { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let t = self.value(x)?.map(|v| v * v);
        self.push("square", t, Op::Square { x }, &[x])
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x)?;
        let n = tx.last_dim();
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax { x }, &[x])
    }

    /// `(z − μ) / (σ + eps)` per last-axis slice, σ the population standard
    /// deviation. Constant slices map to zeros.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        self.check_open()?;
        if !(eps > T::zero()) {
            return Err(TensorError::Parameter("layer_norm eps must be positive".into()));
        }
        let tx = self.value(x)?;
        let n = tx.last_dim();
        let nf = T::from_usize(n).unwrap();
        let rows = tx.len() / n;
        let mut out = Vec::with_capacity(tx.len());
        let mut sigma = Vec::with_capacity(rows);
        let mut denom = Vec::with_capacity(rows);
        for row in tx.data().chunks_exact(n) {
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let s = var.sqrt();
            let d = s + eps;
            out.extend(row.iter().map(|&v| (v - mu) / d));
            sigma.push(s);
            denom.push(d);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("layer_norm", t, Op::LayerNorm { x, sigma, denom }, &[x])
    }

    /// Strided depthwise convolution along the token axis.
    ///
    /// `x: [.., N, D]`, `kernel: [r, D]`, `bias: [D]`. Windows have length and
    /// stride `r`; the token axis is right-padded by repeating the last token
    /// up to a multiple of `r`, so the output has `⌈N/r⌉` tokens.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Var, r: usize) -> Result<Var> {
        self.check_open()?;
        if r < 1 {
            return Err(TensorError::Parameter(format!("reduction factor must be >= 1, got {r}")));
        }
        let (tx, tk) = self.values2(x, kernel)?;
        let tb = self.value(bias)?;
        if tx.shape().len() < 2 {
            return Err(TensorError::Dimension {
                op: "depthwise_conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (batch, n_tok, d) = split_last2(tx.shape());
        if tk.shape() != [r, d] || tb.shape() != [d] {
            return Err(TensorError::Dimension {
                op: "depthwise_conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let n_out = n_tok.div_ceil(r);
        let mut out = Vec::with_capacity(batch * n_out * d);
        for bi in 0..batch {
            let xb = &tx.data()[bi * n_tok * d..(bi + 1) * n_tok * d];
            for o in 0..n_out {
                let start = out.len();
                out.extend_from_slice(tb.data());
                let acc = &mut out[start..];
                for j in 0..r {
                    let src = (o * r + j).min(n_tok - 1);
                    let xrow = &xb[src * d..(src + 1) * d];
                    let krow = &tk.data()[j * d..(j + 1) * d];
                    for ((a, &xv), &kv) in acc.iter_mut().zip(xrow).zip(krow) {
                        *a += xv * kv;
                    }
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        let nd = shape.len();
        shape[nd - 2] = n_out;
        self.push(
            "depthwise_conv1d",
            Tensor::from_parts(shape, out),
            Op::DepthwiseConv { x, kernel, bias, r },
            &[x, kernel, bias],
        )
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x)?;
        let n = tx.last_dim();
        if len == 0 || start + len > n {
            return Err(TensorError::Parameter(format!(
                "slice {start}..{} out of range for last extent {n}",
                start + len
            )));
        }
        let data = tx
            .data()
            .chunks_exact(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push("slice_last", Tensor::from_parts(shape, data), Op::SliceLast { x, start }, &[x])
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_open()?;
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Parameter("concat of zero tensors".into()))?;
        let lead = self.shape(*first)?[..self.shape(*first)?.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p)?;
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::Dimension {
                    op: "concat_last",
                    lhs: self.shape(*first)?.to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)?.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            "concat_last",
            Tensor::from_parts(shape, data),
            Op::ConcatLast { parts: parts.to_vec() },
            parts,
        )
    }

    /// Picks row `row` of the second-to-last axis: `[.., N, S] -> [.., S]`
    /// (a `[N, S]` input gives `[S]`).
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x)?;
        if tx.shape().len() < 2 {
            return Err(TensorError::Dimension {
                op: "select_row",
                lhs: tx.shape().to_vec(),
                rhs: vec![row],
            });
        }
        let (batch, n, s) = split_last2(tx.shape());
        if row >= n {
            return Err(TensorError::Parameter(format!("row {row} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(batch * s);
        for bi in 0..batch {
            let off = bi * n * s + row * s;
            data.extend_from_slice(&tx.data()[off..off + s]);
        }
        let mut shape = tx.shape()[..tx.shape().len() - 2].to_vec();
        shape.push(s);
        self.push("select_row", Tensor::from_parts(shape, data), Op::SelectRow { x, row }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let s = self.value(x)?.data().iter().copied().sum::<T>();
        self.push("sum", Tensor::from_parts(vec![1], vec![s]), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x)?;
        let m = tx.data().iter().copied().sum::<T>() / T::from_usize(tx.len()).unwrap();
        self.push("mean", Tensor::from_parts(vec![1], vec![m]), Op::Mean { x }, &[x])
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_open()?;
        let tp = self.value(pred)?;
        if tp.shape() != target.shape() {
            return Err(TensorError::Dimension {
                op: "mse",
                lhs: tp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = T::from_usize(tp.len()).unwrap();
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        self.push(
            "mse",
            Tensor::from_parts(vec![1], vec![loss]),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        )
    }

    /// Reverse pass from a scalar `loss`. Populates gradients of every leaf
    /// that requires them, then clears all intermediates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        let tl = self.value(loss)?;
        if !tl.is_scalar() {
            return Err(TensorError::NonScalarLoss(tl.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }

        self.leaf_grads = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    let len = node.value.as_ref().map_or(0, Tensor::len);
                    self.leaf_grads[i] = Some(grads[i].take().unwrap_or_else(|| vec![T::zero(); len]));
                }
            } else {
                node.value = None;
                node.op = Op::Leaf;
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("value present during backward")
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out_shape = self.val(Var(i)).shape().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (batch, m, k) = split_last2(ta.shape());
                let n = tb.last_dim();
                let shared = tb.shape().len() == 2;
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ta.len(), |ga| {
                        for bi in 0..batch {
                            let boff = if shared { 0 } else { bi * k * n };
                            gemm_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &tb.data()[boff..boff + k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], tb.len(), |gb| {
                        for bi in 0..batch {
                            let boff = if shared { 0 } else { bi * k * n };
                            gemm_tn_acc(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[boff..boff + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Transpose { x } => {
                if self.wants(*x) {
                    let gt = Tensor::from_parts(out_shape, g.to_vec()).transpose_last2()?;
                    accumulate(&mut grads[x.0], gt.len(), |gx| add_into(gx, gt.data()));
                }
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (rows, k) = rows_of(tx.shape());
                let n = tw.shape()[1];
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], tx.len(), |gx| gemm_nt_acc(g, tw.data(), gx, rows, k, n));
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], tw.len(), |gw| gemm_tn_acc(tx.data(), g, gw, rows, k, n));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], n, |gb| {
                        for row in g.chunks_exact(n) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g.len(), |gv| add_into(gv, g));
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| add_into(ga, g));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for (d, &s) in gb.iter_mut().zip(g) {
                            *d -= s;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((d, &s), &o) in ga.iter_mut().zip(g).zip(tb.data()) {
                            *d += s * o;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for ((d, &s), &o) in gb.iter_mut().zip(g).zip(ta.data()) {
                            *d += s * o;
                        }
                    });
                }
            }
            Op::AddBias { x, b } => {
                let n = self.val(*b).len();
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| add_into(gx, g));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], n, |gb| {
                        for row in g.chunks_exact(n) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * f;
                    }
                });
            }
            Op::MulConst { x, c } => {
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for ((d, &s), &cv) in gx.iter_mut().zip(g).zip(c) {
                        *d += s * cv;
                    }
                });
            }
            Op::AddConst { x } => {
                accumulate(&mut grads[x.0], g.len(), |gx| add_into(gx, g));
            }
            Op::Relu { x } => {
                let tx = self.val(*x);
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Square { x } => {
                let tx = self.val(*x);
                let two = T::lit(2.0);
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *d += two * v * s;
                    }
                });
            }
            Op::Softmax { x } => {
                let y = self.val(Var(i));
                let n = y.last_dim();
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for ((dr, gr), yr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.data().chunks_exact(n)) {
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, sigma, denom } => {
                let y = self.val(Var(i));
                let n = y.last_dim();
                let nf = T::from_usize(n).unwrap();
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for (r, ((dr, gr), yr)) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.data().chunks_exact(n))
                        .enumerate()
                    {
                        let (s, d) = (sigma[r], denom[r]);
                        let gmean = gr.iter().copied().sum::<T>() / nf;
                        let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        let coupling = if s > T::zero() { gy / (nf * s) } else { T::zero() };
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += (gv - gmean) / d - coupling * yv;
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, kernel, bias, r } => {
                let r = *r;
                let (tx, tk) = (self.val(*x), self.val(*kernel));
                let (batch, n_tok, d) = split_last2(tx.shape());
                let n_out = n_tok.div_ceil(r);
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], tx.len(), |gx| {
                        for bi in 0..batch {
                            for o in 0..n_out {
                                let grow = &g[(bi * n_out + o) * d..(bi * n_out + o + 1) * d];
                                for j in 0..r {
                                    let src = (o * r + j).min(n_tok - 1);
                                    let off = (bi * n_tok + src) * d;
                                    let krow = &tk.data()[j * d..(j + 1) * d];
                                    for ((dv, &gv), &kv) in gx[off..off + d].iter_mut().zip(grow).zip(krow) {
                                        *dv += gv * kv;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.wants(*kernel) {
                    accumulate(&mut grads[kernel.0], tk.len(), |gk| {
                        for bi in 0..batch {
                            for o in 0..n_out {
                                let grow = &g[(bi * n_out + o) * d..(bi * n_out + o + 1) * d];
                                for j in 0..r {
                                    let src = (o * r + j).min(n_tok - 1);
                                    let off = (bi * n_tok + src) * d;
                                    let xrow = &tx.data()[off..off + d];
                                    for ((dv, &gv), &xv) in gk[j * d..(j + 1) * d].iter_mut().zip(grow).zip(xrow) {
                                        *dv += gv * xv;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], d, |gb| {
                        for row in g.chunks_exact(d) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::SliceLast { x, start } => {
                let tx = self.val(*x);
                let n = tx.last_dim();
                let len = *out_shape.last().unwrap();
                let start = *start;
                accumulate(&mut grads[x.0], tx.len(), |gx| {
                    for (dr, gr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                        add_into(&mut dr[start..start + len], gr);
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let total = *out_shape.last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.val(p);
                    let w = tp.last_dim();
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], tp.len(), |gp| {
                            for (dr, gr) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                                add_into(dr, &gr[offset..offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SelectRow { x, row } => {
                let tx = self.val(*x);
                let (batch, n, s) = split_last2(tx.shape());
                accumulate(&mut grads[x.0], tx.len(), |gx| {
                    for bi in 0..batch {
                        let off = bi * n * s + row * s;
                        add_into(&mut gx[off..off + s], &g[bi * s..(bi + 1) * s]);
                    }
                });
            }
            Op::Sum { x } => {
                let len = self.val(*x).len();
                let g0 = g[0];
                accumulate(&mut grads[x.0], len, |gx| gx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean { x } => {
                let len = self.val(*x).len();
                let g0 = g[0] / T::from_usize(len).unwrap();
                accumulate(&mut grads[x.0], len, |gx| gx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mse { pred, target } => {
                let tp = self.val(*pred);
                let scale = T::lit(2.0) * g[0] / T::from_usize(tp.len()).unwrap();
                accumulate(&mut grads[pred.0], tp.len(), |gp| {
                    for ((d, &p), &t) in gp.iter_mut().zip(tp.data()).zip(target) {
                        *d += scale * (p - t);
                    }
                });
            }
        }
        Ok(())
    }
}
