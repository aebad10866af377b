//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! whatever it needs for the backward pass. [`Tape::backward`] walks the nodes
//! in exact reverse order of execution. Parameters enter the tape by reference
//! so a forward pass over a large model copies nothing.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive bias applied to masked logits before the softmax.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of every built-in differentiable operation, as reported by
/// [`Tape::op_name`].
pub const DIFFERENTIABLE_OPS: [&str; 22] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_row",
    "scale",
    "transpose",
    "embedding_lookup",
    "slice_rows",
    "slice_cols",
    "select_rows",
    "concat_cols",
    "softmax_rows",
    "log_softmax_rows",
    "normalize_rows",
    "kl_div_rows",
    "layernorm",
    "gelu",
    "mse",
    "sum",
    "mean",
    "pick",
    "dropout",
];

/// User-supplied vector-Jacobian product for operations the tape does not
/// know about.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    /// Returns one optional gradient per input, each shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows { x: Var, sums: Vec<T> },
    KlDiv { p: Tensor<T>, q: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    Gelu(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Pick { x: Var, idx: Vec<(usize, usize)> },
    Dropout { x: Var, mask: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Embedding { .. } => "embedding_lookup",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Softmax(..) => "softmax_rows",
            Op::LogSoftmax(..) => "log_softmax_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::KlDiv { .. } => "kl_div_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Mse(..) => "mse",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Pick { .. } => "pick",
            Op::Dropout { .. } => "dropout",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of differentiable operations. Lifetime `'a` bounds borrowed
/// parameter tensors.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    flops: u64,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating point operations spent in forward matrix products so far,
    /// counting each multiply-add as two.
    pub fn matmul_flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// A trainable tensor borrowed from its owner.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// An owned leaf; `requires_grad` decides whether it receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(t), requires_grad)
    }

    /// A borrowed leaf that never receives a gradient.
    pub fn frozen(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward operations ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        self.flops += 2 * (m * k * out.cols()) as u64;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_matrix("matmul_nt")?;
        bv.expect_matrix("matmul_nt")?;
        if av.cols() != bv.cols() {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions differ: {:?} x {:?}ᵀ",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            av.data(),
            k as isize,
            1,
            bv.data(),
            1,
            k as isize,
            T::ZERO,
            &mut out,
        );
        self.flops += 2 * (m * k * n) as u64;
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        xv.expect_matrix("add_row")?;
        if bv.numel() != xv.cols() {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} does not match rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let n = xv.cols();
        let b = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Gathers rows of `table` (vocab×d) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        tv.expect_matrix("embedding_lookup")?;
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange(format!(
                    "id {id} outside embedding table of {vocab} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, end)?;
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("select_rows")?;
        let n = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::OutOfRange(format!(
                    "row {r} outside {:?}",
                    xv.shape()
                )));
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            pv.expect_matrix("concat_cols")?;
            if pv.rows() != m {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    pv.rows(),
                    m
                )));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row-wise softmax. Where `mask` is 0 the logit receives an additive
    /// −1e30, which yields an exact zero probability.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("softmax_rows")?;
        if let Some(mk) = mask {
            xv.expect_same_shape(mk, "softmax_rows mask")?;
        }
        let (m, n) = (xv.rows(), xv.cols());
        let neg = T::from_f64(MASK_NEG);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            match mask {
                Some(mk) => {
                    let mrow = &mk.data()[i * n..(i + 1) * n];
                    if mrow.iter().all(|&v| v == T::ZERO) {
                        return Err(Error::DegenerateMask { row: i });
                    }
                    for j in 0..n {
                        o[j] = row[j] + (T::ONE - mrow[j]) * neg;
                    }
                }
                None => o.copy_from_slice(row),
            }
            softmax_in_place(o);
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("log_softmax_rows")?;
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("normalize_rows")?;
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        let mut sums = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let s: T = row.iter().copied().sum();
            if !(s > T::ZERO) {
                return Err(Error::NotNormalized {
                    row: i,
                    sum: s.to_f64(),
                });
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            sums.push(s);
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::NormalizeRows { x, sums }, &[x])
    }

    /// Mean over rows of `KL(p_row ‖ q_row)` in nats. `p` is a constant; only
    /// `q` receives a gradient. Terms with `p == 0` contribute zero.
    pub fn kl_div_rows(&mut self, p: &Tensor<T>, q: Var) -> Result<Var> {
        let qv = self.value(q);
        qv.expect_matrix("kl_div_rows")?;
        p.expect_same_shape(qv, "kl_div_rows")?;
        let (m, n) = (qv.rows(), qv.cols());
        if m == 0 {
            return Err(Error::Shape("kl_div_rows over zero rows".into()));
        }
        let tol = T::NORM_TOL;
        for t in [p, qv] {
            for i in 0..m {
                let s: f64 = t.row(i).iter().map(|v| v.to_f64()).sum();
                if (s - 1.0).abs() > tol || t.row(i).iter().any(|&v| v < T::ZERO) {
                    return Err(Error::NotNormalized { row: i, sum: s });
                }
            }
        }
        let mut total = T::ZERO;
        for i in 0..m {
            for j in 0..n {
                let (pj, qj) = (p.data()[i * n + j], qv.data()[i * n + j]);
                if pj > T::ZERO {
                    if !(qj > T::ZERO) {
                        return Err(Error::SupportViolation { row: i, col: j });
                    }
                    total += pj * (pj / qj).ln();
                }
            }
        }
        let out = Tensor::scalar(total / T::from_f64(m as f64));
        self.push(out, Op::KlDiv { p: p.clone(), q }, &[q])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        xv.expect_matrix("layernorm")?;
        let (m, d) = (xv.rows(), xv.cols());
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Shape(format!(
                "layernorm: gain {:?} / bias {:?} do not match width {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut xhat = vec![T::ZERO; m * d];
        let mut out = vec![T::ZERO; m * d];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv = T::ONE / (var + eps).sqrt();
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(vec![m, d], out)?;
        let xhat = Tensor::new(vec![m, d], xhat)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_value);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv, "mse")?;
        let n = T::from_f64(av.numel() as f64);
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / T::from_f64(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Picks entries `(row, col)` of a matrix into a vector.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("pick")?;
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= xv.rows() || c >= xv.cols() {
                return Err(Error::OutOfRange(format!(
                    "pick ({r}, {c}) outside {:?}",
                    xv.shape()
                )));
            }
            data.push(xv.get(r, c));
        }
        if data.is_empty() {
            return Err(Error::Shape("pick of no entries".into()));
        }
        let out = Tensor::new(vec![data.len()], data)?;
        self.push(
            out,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1/(1-rate)`. A rate of 0 returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Records an operation whose output was computed by the caller and whose
    /// backward pass is supplied by `op`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Clears accumulated gradients so [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient flowing into {}",
                    self.nodes[i].op.name()
                )));
            }
            let node = &self.nodes[i];
            backward_node(node, &self.nodes, &mut self.grads, &g);
            self.grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(row[0], T::max);
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<'_, T>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Accumulates `op(a) · op(b)` into the gradient slot of `v`.
#[allow(clippy::too_many_arguments)]
fn accumulate_gemm<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<'_, T>],
    v: Var,
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (n, rsb, csb) = if tb {
        (br, 1, bc as isize)
    } else {
        (bc, bc as isize, 1)
    };
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    T::gemm(
        m,
        k,
        n,
        T::ONE,
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        T::ONE,
        slot.data_mut(),
    );
}

fn backward_node<T: Real>(
    node: &Node<'_, T>,
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Tensor<T>>],
    g: &Tensor<T>,
) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    let out = &*node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            accumulate_gemm(grads, nodes, *a, g, false, val(*b), true);
            accumulate_gemm(grads, nodes, *b, val(*a), true, g, false);
        }
        Op::MatMulNT(a, b) => {
            accumulate_gemm(grads, nodes, *a, g, false, val(*b), false);
            accumulate_gemm(grads, nodes, *b, g, true, val(*a), false);
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::AddRow(x, bias) => {
            accumulate(grads, nodes, *x, g.clone());
            let n = g.cols();
            let mut gb = vec![T::ZERO; n];
            for (i, &v) in g.data().iter().enumerate() {
                gb[i % n] += v;
            }
            let gb = Tensor::new(val(*bias).shape().to_vec(), gb).expect("bias shape");
            accumulate(grads, nodes, *bias, gb);
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.map(|v| v * *c)),
        Op::Transpose(x) => accumulate(grads, nodes, *x, g.transpose().expect("matrix")),
        Op::Embedding { table, ids } => {
            if !nodes[table.0].requires_grad {
                return;
            }
            let d = g.cols();
            let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(val(*table).shape()));
            let data = slot.data_mut();
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    data[id * d + j] += g.data()[r * d + j];
                }
            }
        }
        Op::SliceRows { x, start } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let n = g.cols();
            let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(val(*x).shape()));
            for (a, &b) in slot.data_mut()[start * n..].iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Op::SliceCols { x, start } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let (m, w) = (g.rows(), g.cols());
            let n = val(*x).cols();
            let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(val(*x).shape()));
            let data = slot.data_mut();
            for i in 0..m {
                for j in 0..w {
                    data[i * n + start + j] += g.data()[i * w + j];
                }
            }
        }
        Op::SelectRows { x, rows } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let n = g.cols();
            let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(val(*x).shape()));
            let data = slot.data_mut();
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..n {
                    data[r * n + j] += g.data()[k * n + j];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let m = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if nodes[p.0].requires_grad {
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, nodes, p, Tensor::new(vec![m, w], gp).expect("slice"));
                }
                offset += w;
            }
        }
        Op::Softmax(x) => {
            let (m, n) = (out.rows(), out.cols());
            let mut gx = vec![T::ZERO; m * n];
            for i in 0..m {
                let y = out.row(i);
                let gy = g.row(i);
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    gx[i * n + j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![m, n], gx).expect("shape"));
        }
        Op::LogSoftmax(x) => {
            let (m, n) = (out.rows(), out.cols());
            let mut gx = vec![T::ZERO; m * n];
            for i in 0..m {
                let gs: T = g.row(i).iter().copied().sum();
                for j in 0..n {
                    gx[i * n + j] = g.row(i)[j] - out.row(i)[j].exp() * gs;
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![m, n], gx).expect("shape"));
        }
        Op::NormalizeRows { x, sums } => {
            let (m, n) = (out.rows(), out.cols());
            let mut gx = vec![T::ZERO; m * n];
            for i in 0..m {
                let y = out.row(i);
                let gy = g.row(i);
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    gx[i * n + j] = (gy[j] - dot) / sums[i];
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![m, n], gx).expect("shape"));
        }
        Op::KlDiv { p, q } => {
            let qv = val(*q);
            let m = T::from_f64(qv.rows() as f64);
            let scale = g.item() / m;
            let gq = p
                .data()
                .iter()
                .zip(qv.data())
                .map(|(&pj, &qj)| {
                    if pj > T::ZERO {
                        -(pj / qj) * scale
                    } else {
                        T::ZERO
                    }
                })
                .collect();
            accumulate(
                grads,
                nodes,
                *q,
                Tensor::new(qv.shape().to_vec(), gq).expect("shape"),
            );
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (m, d) = (xhat.rows(), xhat.cols());
            let gv = val(*gamma);
            let mut gg = vec![T::ZERO; d];
            let mut gb = vec![T::ZERO; d];
            let mut gx = vec![T::ZERO; m * d];
            let inv_d = T::from_f64(1.0 / d as f64);
            for i in 0..m {
                let h = xhat.row(i);
                let gy = g.row(i);
                let mut mean_gh = T::ZERO;
                let mut mean_ghh = T::ZERO;
                for j in 0..d {
                    gg[j] += gy[j] * h[j];
                    gb[j] += gy[j];
                    let gh = gy[j] * gv.data()[j];
                    mean_gh += gh;
                    mean_ghh += gh * h[j];
                }
                mean_gh *= inv_d;
                mean_ghh *= inv_d;
                for j in 0..d {
                    let gh = gy[j] * gv.data()[j];
                    gx[i * d + j] = inv_std[i] * (gh - mean_gh - h[j] * mean_ghh);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![m, d], gx).expect("shape"));
            accumulate(
                grads,
                nodes,
                *gamma,
                Tensor::new(gv.shape().to_vec(), gg).expect("shape"),
            );
            accumulate(
                grads,
                nodes,
                *beta,
                Tensor::new(val(*beta).shape().to_vec(), gb).expect("shape"),
            );
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            let gx = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gy)| gy * gelu_grad(v))
                .collect();
            accumulate(grads, nodes, *x, Tensor::new(xv.shape().to_vec(), gx).expect("shape"));
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let c = T::from_f64(2.0 / av.numel() as f64) * g.item();
            let ga: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| (x - y) * c)
                .collect();
            let gb = ga.iter().map(|&v| -v).collect();
            accumulate(grads, nodes, *a, Tensor::new(av.shape().to_vec(), ga).expect("shape"));
            accumulate(grads, nodes, *b, Tensor::new(bv.shape().to_vec(), gb).expect("shape"));
        }
        Op::Sum(x) => accumulate(grads, nodes, *x, Tensor::full(val(*x).shape(), g.item())),
        Op::Mean(x) => {
            let xv = val(*x);
            let c = g.item() / T::from_f64(xv.numel() as f64);
            accumulate(grads, nodes, *x, Tensor::full(xv.shape(), c));
        }
        Op::Pick { x, idx } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let n = val(*x).cols();
            let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(val(*x).shape()));
            let data = slot.data_mut();
            for (k, &(r, c)) in idx.iter().enumerate() {
                data[r * n + c] += g.data()[k];
            }
        }
        Op::Dropout { x, mask } => {
            let gx = g.data().iter().zip(mask).map(|(&a, &k)| a * k).collect();
            accumulate(grads, nodes, *x, Tensor::new(g.shape().to_vec(), gx).expect("shape"));
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            let gs = op.backward(&ins, out, g);
            for (&v, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    accumulate(grads, nodes, v, gi);
                }
            }
        }
    }
}
