use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use rand::Rng as _;

use super::{AutodiffError, Tensor};
use crate::math;
use crate::rng;
use crate::softrank::{self, SoftRankTape};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u32,
    index: usize,
}

/// How the right-hand operand of an elementwise op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Column,
}

impl Broadcast {
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => r * cols + c,
            Broadcast::Scalar => 0,
            Broadcast::Row => c,
            Broadcast::Column => r,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Div(usize, usize, Broadcast),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    RowSoftmax(usize),
    CausalSoftmax(usize),
    RowLogSoftmax(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Tanh(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    GatherRows(usize, Vec<usize>),
    PickPerRow(usize, Vec<usize>),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout(usize, Vec<f64>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SoftRank(usize, SoftRankTape),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape { op, lhs: a.shape(), rhs: b.shape() }
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    acc.get_or_insert_with(|| vec![0.0; len])
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = math::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::Detached);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Gradient of the last backward loss with respect to `v`, if `v` took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, AutodiffError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Leaf whose gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: needs });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.trainable())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn broadcast(&self, op: &'static str, a: usize, b: usize) -> Result<Broadcast, AutodiffError> {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.shape() == y.shape() {
            Ok(Broadcast::Same)
        } else if y.shape() == [1, 1] {
            Ok(Broadcast::Scalar)
        } else if y.rows() == 1 && y.cols() == x.cols() {
            Ok(Broadcast::Row)
        } else if y.cols() == 1 && y.rows() == x.rows() {
            Ok(Broadcast::Column)
        } else {
            Err(shape_err(op, x, y))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let bc = self.broadcast(name, a, b)?;
        let x = &self.nodes[a].value;
        let y = &self.nodes[b].value;
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(x.data()[r * cols + c], y.data()[bc.index(r, c, cols)]));
            }
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(name, Tensor::new(rows, cols, out)?, make(a, b, bc), needs)
    }

    /// Elementwise `a + b`; `b` may broadcast as a scalar, row or column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        let out = Tensor::new(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect())?;
        let needs = self.ng(i);
        self.push(name, out, op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        self.unary("scale", a, |v| v * c, Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        self.unary("add_scalar", a, |v| v + c, Op::AddScalar(i))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        self.unary("log", a, math::ln, Op::Log(i))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        self.unary("exp", a, math::exp, Op::Exp(i))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        self.unary("sqrt", a, math::sqrt, Op::Sqrt(i))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        self.unary("tanh", a, math::tanh, Op::Tanh(i))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        self.unary("gelu", a, gelu, Op::Gelu(i))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        let (n, k, m) = (x.rows(), x.cols(), y.cols());
        let mut out = vec![0.0; n * m];
        matmul_raw(x.data(), y.data(), n, k, m, &mut out);
        let needs = self.ng(ai) || self.ng(bi);
        self.push("matmul", Tensor::new(n, m, out)?, Op::MatMul(ai, bi), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            for col in 0..c {
                out[col * r + row] = x.data()[row * c + col];
            }
        }
        let needs = self.ng(i);
        self.push("transpose", Tensor::new(c, r, out)?, Op::Transpose(i), needs)
    }

    /// Softmax over each row, stabilized by max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        let cols = x.cols();
        let mut out = vec![0.0; x.len()];
        for r in 0..x.rows() {
            softmax_row(x.row_slice(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let needs = self.ng(i);
        let t = Tensor::new(x.rows(), cols, out)?;
        self.push("row_softmax", t, Op::RowSoftmax(i), needs)
    }

    /// Softmax of row `r` over columns `0..=r` only; later columns are exactly
    /// zero. Input must be square.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        if x.rows() != x.cols() {
            return Err(shape_err("causal_softmax", x, x));
        }
        let n = x.cols();
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            softmax_row(&x.row_slice(r)[..=r], &mut out[r * n..r * n + r + 1]);
        }
        let needs = self.ng(i);
        self.push("causal_softmax", Tensor::new(n, n, out)?, Op::CausalSoftmax(i), needs)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        let cols = x.cols();
        let mut out = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let needs = self.ng(i);
        let t = Tensor::new(x.rows(), cols, out)?;
        self.push("row_log_softmax", t, Op::RowLogSoftmax(i), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let s = self.nodes[i].value.data().iter().sum();
        let needs = self.ng(i);
        self.push("sum", Tensor::scalar(s), Op::Sum(i), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        if x.is_empty() {
            return Err(AutodiffError::Invalid { op: "mean", msg: "empty tensor".into() });
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let needs = self.ng(i);
        self.push("mean", Tensor::scalar(s), Op::Mean(i), needs)
    }

    /// Sum over each row into an `r x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        let out = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
        let needs = self.ng(i);
        self.push("row_sum", Tensor::column(out), Op::RowSum(i), needs)
    }

    /// Rows of `a` at `indices`, in order (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        if let Some(&bad) = indices.iter().find(|&&r| r >= x.rows()) {
            return Err(AutodiffError::Invalid { op: "gather_rows", msg: format!("row {bad} of {}", x.rows()) });
        }
        let mut out = Vec::with_capacity(indices.len() * x.cols());
        for &r in indices {
            out.extend_from_slice(x.row_slice(r));
        }
        let needs = self.ng(i);
        let t = Tensor::new(indices.len(), x.cols(), out)?;
        self.push("gather_rows", t, Op::GatherRows(i, indices.to_vec()), needs)
    }

    /// `out[r] = a[r, cols[r]]` as an `r x 1` column.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        if cols.len() != x.rows() {
            return Err(AutodiffError::Shape { op: "pick_per_row", lhs: x.shape(), rhs: [cols.len(), 1] });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= x.cols()) {
            return Err(AutodiffError::Invalid { op: "pick_per_row", msg: format!("column {bad} of {}", x.cols()) });
        }
        let out = cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let needs = self.ng(i);
        self.push("pick_per_row", Tensor::column(out), Op::PickPerRow(i, cols.to_vec()), needs)
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let t = &self.nodes[xi].value;
        let n = t.cols();
        for p in [gi, bi] {
            let pv = &self.nodes[p].value;
            if pv.shape() != [1, n] {
                return Err(shape_err("layer_norm", t, pv));
            }
        }
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut out = vec![0.0; t.len()];
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; t.rows()];
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mu) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let needs = self.ng(xi) || self.ng(gi) || self.ng(bi);
        let value = Tensor::new(t.rows(), n, out)?;
        self.push("layer_norm", value, Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, rstd }, needs)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`. The
    /// identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64, train: bool) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Invalid { op: "dropout", msg: format!("rate {rate} outside [0, 1)") });
        }
        if !train || rate == 0.0 {
            self.idx(a)?;
            return Ok(a);
        }
        let i = self.idx(a)?;
        let mut r = rng::stream(seed, 0);
        let keep = 1.0 / (1.0 - rate);
        let x = &self.nodes[i].value;
        let mask: Vec<f64> = (0..x.len()).map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(x.rows(), x.cols(), out)?;
        let needs = self.ng(i);
        self.push("dropout", t, Op::Dropout(i, mask), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(AutodiffError::Invalid { op: "concat_cols", msg: "no inputs".into() });
        };
        let rows = self.nodes[first].value.rows();
        for &p in &idx {
            let v = &self.nodes[p].value;
            if v.rows() != rows {
                return Err(shape_err("concat_cols", &self.nodes[first].value, v));
            }
        }
        let cols: usize = idx.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in &idx {
                out.extend_from_slice(self.nodes[p].value.row_slice(r));
            }
        }
        let needs = idx.iter().any(|&p| self.ng(p));
        self.push("concat_cols", Tensor::new(rows, cols, out)?, Op::ConcatCols(idx), needs)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        if start + len > x.cols() || len == 0 {
            return Err(AutodiffError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {}", start + len, x.cols()),
            });
        }
        let mut out = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let needs = self.ng(i);
        let t = Tensor::new(x.rows(), len, out)?;
        self.push("slice_cols", t, Op::SliceCols(i, start), needs)
    }

    /// Differentiable ascending soft ranks of a vector (any `1 x n` or
    /// `n x 1` shape), see [`crate::softrank`].
    pub fn soft_rank(&mut self, a: Var, eps: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(a)?;
        let x = &self.nodes[i].value;
        if x.rows() != 1 && x.cols() != 1 {
            return Err(AutodiffError::Invalid { op: "soft_rank", msg: format!("expected a vector, got {:?}", x.shape()) });
        }
        let (ranks, tape) = softrank::soft_rank_with_tape(x.data(), eps)
            .map_err(|e| AutodiffError::Invalid { op: "soft_rank", msg: format!("{e}") })?;
        let t = Tensor::new(x.rows(), x.cols(), ranks)?;
        let needs = self.ng(i);
        self.push("soft_rank", t, Op::SoftRank(i, tape), needs)
    }

    /// Reverse sweep from a `1 x 1` loss. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let li = self.idx(loss)?;
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let shape = self.nodes[li].value.shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for n in (0..=li).rev() {
            if !self.nodes[n].needs_grad {
                continue;
            }
            let Some(g) = grads[n].take() else { continue };
            self.backward_node(n, &g, &mut grads);
            grads[n] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, n: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[n];
        let out = &node.value;
        let len_of = |i: usize| self.nodes[i].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    let ga = add_into(&mut grads[*a], g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.ng(*b) {
                    let cols = out.cols();
                    let gb = add_into(&mut grads[*b], len_of(*b));
                    for (k, &gv) in g.iter().enumerate() {
                        gb[bc.index(k / cols, k % cols, cols)] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let cols = out.cols();
                if self.ng(*a) {
                    let ga = add_into(&mut grads[*a], g.len());
                    for (k, &gv) in g.iter().enumerate() {
                        ga[k] += gv * y.data()[bc.index(k / cols, k % cols, cols)];
                    }
                }
                if self.ng(*b) {
                    let gb = add_into(&mut grads[*b], y.len());
                    for (k, &gv) in g.iter().enumerate() {
                        gb[bc.index(k / cols, k % cols, cols)] += gv * x.data()[k];
                    }
                }
            }
            Op::Div(a, b, bc) => {
                let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let cols = out.cols();
                if self.ng(*a) {
                    let ga = add_into(&mut grads[*a], g.len());
                    for (k, &gv) in g.iter().enumerate() {
                        ga[k] += gv / y.data()[bc.index(k / cols, k % cols, cols)];
                    }
                }
                if self.ng(*b) {
                    let gb = add_into(&mut grads[*b], y.len());
                    for (k, &gv) in g.iter().enumerate() {
                        let j = bc.index(k / cols, k % cols, cols);
                        let yv = y.data()[j];
                        gb[j] -= gv * x.data()[k] / (yv * yv);
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = add_into(&mut grads[*a], g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
            Op::AddScalar(a) => {
                let ga = add_into(&mut grads[*a], g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (nr, k, m) = (x.rows(), x.cols(), y.cols());
                if self.ng(*a) {
                    // dA = G · Bᵀ
                    let ga = add_into(&mut grads[*a], nr * k);
                    for i in 0..nr {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &y.data()[p * m..(p + 1) * m];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(u, v)| u * v).sum::<f64>();
                        }
                    }
                }
                if self.ng(*b) {
                    // dB = Aᵀ · G
                    let gb = add_into(&mut grads[*b], k * m);
                    for i in 0..nr {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = x.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let ga = add_into(&mut grads[*a], g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::RowSoftmax(a) | Op::CausalSoftmax(a) => {
                let cols = out.cols();
                let ga = add_into(&mut grads[*a], g.len());
                for r in 0..out.rows() {
                    let p = out.row_slice(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = p.iter().zip(gr).map(|(u, v)| u * v).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += p[c] * (gr[c] - dot);
                    }
                }
            }
            Op::RowLogSoftmax(a) => {
                let cols = out.cols();
                let ga = add_into(&mut grads[*a], g.len());
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] += gr[c] - math::exp(y[c]) * total;
                    }
                }
            }
            Op::Log(a) => {
                let x = self.nodes[*a].value.data();
                let ga = add_into(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] / x[k];
                }
            }
            Op::Exp(a) => {
                let ga = add_into(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * out.data()[k];
                }
            }
            Op::Sqrt(a) => {
                let ga = add_into(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * 0.5 / out.data()[k];
                }
            }
            Op::Tanh(a) => {
                let ga = add_into(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    let t = out.data()[k];
                    ga[k] += g[k] * (1.0 - t * t);
                }
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data();
                let ga = add_into(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * gelu_grad(x[k]);
                }
            }
            Op::Sum(a) => {
                let ga = add_into(&mut grads[*a], len_of(*a));
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean(a) => {
                let len = len_of(*a);
                let ga = add_into(&mut grads[*a], len);
                for x in ga.iter_mut() {
                    *x += g[0] / len as f64;
                }
            }
            Op::RowSum(a) => {
                let cols = self.nodes[*a].value.cols();
                let ga = add_into(&mut grads[*a], len_of(*a));
                for (k, x) in ga.iter_mut().enumerate() {
                    *x += g[k / cols];
                }
            }
            Op::GatherRows(a, indices) => {
                let cols = out.cols();
                let ga = add_into(&mut grads[*a], len_of(*a));
                for (i, &r) in indices.iter().enumerate() {
                    for c in 0..cols {
                        ga[r * cols + c] += g[i * cols + c];
                    }
                }
            }
            Op::PickPerRow(a, cols_idx) => {
                let cols = self.nodes[*a].value.cols();
                let ga = add_into(&mut grads[*a], len_of(*a));
                for (r, &c) in cols_idx.iter().enumerate() {
                    ga[r * cols + c] += g[r];
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = out.cols();
                let gv = self.nodes[*gain].value.data();
                if self.ng(*gain) {
                    let gg = add_into(&mut grads[*gain], n);
                    for (k, &d) in g.iter().enumerate() {
                        gg[k % n] += d * xhat[k];
                    }
                }
                if self.ng(*bias) {
                    let gb = add_into(&mut grads[*bias], n);
                    for (k, &d) in g.iter().enumerate() {
                        gb[k % n] += d;
                    }
                }
                if self.ng(*x) {
                    let gx = add_into(&mut grads[*x], g.len());
                    for r in 0..out.rows() {
                        let row = r * n..(r + 1) * n;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for k in row.clone() {
                            let dh = g[k] * gv[k % n];
                            m1 += dh;
                            m2 += dh * xhat[k];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for k in row {
                            let dh = g[k] * gv[k % n];
                            gx[k] += rstd[r] * (dh - m1 - xhat[k] * m2);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = add_into(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * mask[k];
                }
            }
            Op::ConcatCols(parts) => {
                let cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    if self.ng(p) {
                        let gp = add_into(&mut grads[p], len_of(p));
                        for r in 0..out.rows() {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * cols + offset + c];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.nodes[*a].value.cols();
                let len = out.cols();
                let ga = add_into(&mut grads[*a], len_of(*a));
                for r in 0..out.rows() {
                    for c in 0..len {
                        ga[r * src_cols + start + c] += g[r * len + c];
                    }
                }
            }
            Op::SoftRank(a, tape) => {
                let d = tape.backward(g);
                let ga = add_into(&mut grads[*a], g.len());
                for (x, y) in ga.iter_mut().zip(d) {
                    *x += y;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_gives_ones_and_zero_scale_gives_zero() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![0.3, -0.7]));
        let e = g.exp(p).unwrap();
        let s = g.sum(e).unwrap();
        let z = g.scale(s, 0.0).unwrap();
        g.backward(z).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(AutodiffError::NonScalarLoss([1, 2]))));
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(AutodiffError::AlreadyBackpropagated));

        let mut other = Graph::new();
        let q = other.param(Tensor::scalar(1.0));
        assert_eq!(g.sum(q), Err(AutodiffError::Detached));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(3, 4));
        let b = g.constant(Tensor::zeros(3, 2));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, AutodiffError::Shape { op: "matmul", lhs: [3, 4], rhs: [3, 2] });
        assert!(format!("{err}").contains("[3, 4]") && format!("{err}").contains("[3, 2]"));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn dropout_eval_identity_and_train_determinism() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(4, 4, 1.5));
        let y = g.dropout(x, 0.5, 9, false).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let a = g.dropout(x, 0.5, 9, true).unwrap();
        let b = g.dropout(x, 0.5, 9, true).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 3.0));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(3, 3, vec![1.0, 5.0, 5.0, 2.0, 1.0, 9.0, 0.0, 0.0, 0.0]).unwrap());
        let p = g.causal_softmax(x).unwrap();
        let v = g.value(p);
        assert_eq!(v.row_slice(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.get(1, 2), 0.0);
        assert!((v.row_slice(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        assert_eq!(g.log(x), Err(AutodiffError::NonFinite { op: "log" }));
    }
}
