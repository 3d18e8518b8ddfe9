//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value, so node indices
//! are a topological order by construction. [`Graph::grad`] visits the nodes
//! from the loss backwards exactly once, accumulating over fan-out.

use std::sync::Arc;

use statrs::function::erf::erf;

use super::{matmul_a_bt_into, matmul_at_b_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense boolean attention mask; `allows(i, j)` means query `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        AttentionMask {
            rows,
            cols,
            allowed,
        }
    }

    /// Lower-triangular (inclusive) mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Builds a mask from a `[rows, cols]` tensor of zeros and ones.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape(format!("mask must be a matrix, got {:?}", t.shape())));
        }
        let mut allowed = Vec::with_capacity(t.len());
        for &x in t.data() {
            match x {
                0.0 => allowed.push(false),
                1.0 => allowed.push(true),
                other => return Err(Error::invalid(format!("mask entry {other} is not 0 or 1"))),
            }
        }
        Ok(AttentionMask {
            rows: t.shape()[0],
            cols: t.shape()[1],
            allowed,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| !self.allowed[i * self.cols..(i + 1) * self.cols].contains(&true))
    }
}

/// Per-row rotation angles for rotary embeddings: `pairs` angles per row,
/// applied to channel pairs `(2p, 2p + 1)` of every head.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationTable {
    rows: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotationTable {
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != rows * pairs {
            return Err(Error::shape(format!(
                "{} angles for {rows} rows x {pairs} pairs",
                angles.len()
            )));
        }
        Ok(RotationTable {
            rows,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Rotates `x` (`[rows, heads * 2 * pairs]`) in place; `inverse` rotates by the negated angles.
    pub(crate) fn apply(&self, x: &mut [f64], heads: usize, inverse: bool) {
        let head_dim = 2 * self.pairs;
        let width = heads * head_dim;
        for r in 0..self.rows {
            let row = &mut x[r * width..(r + 1) * width];
            for h in 0..heads {
                for p in 0..self.pairs {
                    let c = self.cos[r * self.pairs + p];
                    let s = if inverse {
                        -self.sin[r * self.pairs + p]
                    } else {
                        self.sin[r * self.pairs + p]
                    };
                    let i = h * head_dim + 2 * p;
                    let (a, b) = (row[i], row[i + 1]);
                    row[i] = a * c - b * s;
                    row[i + 1] = a * s + b * c;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        heads: usize,
        probs: Vec<f64>,
    },
    Rotate {
        x: Var,
        table: Arc<RotationTable>,
        heads: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// `x[.., d] + bias[d]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.len() != xv.cols() {
            return Err(Error::shape(format!(
                "add_row: bias {:?} vs input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(c, bv.len());
        Ok(self.push(Op::AddRow(x, bias), out, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(Op::Scale(x, s), out, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// GELU, exact erf form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(Op::Gelu(x), out, &[x])
    }

    /// Normalizes each last-axis vector to zero mean and unit variance
    /// (`1 / sqrt(var + eps)`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(format!(
                "layer_norm over width {d} with gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = xv.rows();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = xv.clone();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                o[j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            out,
            &[x, gain, bias],
        ))
    }

    /// Multi-head masked scaled dot-product attention.
    ///
    /// `q: [T, H*dh]`, `k, v: [S, H*dh]`, `mask: T x S`. Masked logits take no
    /// part in the softmax (weight exactly zero); a row with no attendable key
    /// is an error.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        heads: usize,
    ) -> Result<Var> {
        let (t, dq) = self.matrix_dims(q, "attention q")?;
        let (s, dk) = self.matrix_dims(k, "attention k")?;
        let (sv, dv) = self.matrix_dims(v, "attention v")?;
        if dq != dk || dk != dv || s != sv {
            return Err(Error::shape(format!(
                "attention q [{t},{dq}], k [{s},{dk}], v [{sv},{dv}]"
            )));
        }
        if mask.rows() != t || mask.cols() != s {
            return Err(Error::shape(format!(
                "attention mask {}x{} for {t} queries and {s} keys",
                mask.rows(),
                mask.cols()
            )));
        }
        if heads == 0 || dq % heads != 0 {
            return Err(Error::shape(format!("width {dq} not divisible into {heads} heads")));
        }
        if let Some(row) = mask.first_empty_row() {
            return Err(Error::EmptyMaskRow { row });
        }
        let dh = dq / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * t * s];
        let mut out = vec![0.0; t * dq];
        let mut logits = vec![0.0; s];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qd[i * dq + off..i * dq + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..s {
                    if mask.allows(i, j) {
                        let kj = &kd[j * dq + off..j * dq + off + dh];
                        let l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        logits[j] = l;
                        max = max.max(l);
                    }
                }
                let p = &mut probs[(h * t + i) * s..(h * t + i + 1) * s];
                let mut z = 0.0;
                for j in 0..s {
                    if mask.allows(i, j) {
                        let e = (logits[j] - max).exp();
                        p[j] = e;
                        z += e;
                    }
                }
                let o = &mut out[i * dq + off..i * dq + off + dh];
                for j in 0..s {
                    if mask.allows(i, j) {
                        p[j] /= z;
                        let vj = &vd[j * dq + off..j * dq + off + dh];
                        for (ov, &x) in o.iter_mut().zip(vj) {
                            *ov += p[j] * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![t, dq], out)?;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            },
            out,
            &[q, k, v],
        ))
    }

    /// Rotary embedding: rotates channel pairs of each head by the table's per-row angles.
    pub fn rotate(&mut self, x: Var, table: Arc<RotationTable>, heads: usize) -> Result<Var> {
        let (r, d) = self.matrix_dims(x, "rotate")?;
        if r != table.rows() || d != heads * 2 * table.pairs() {
            return Err(Error::shape(format!(
                "rotation table {}x{} pairs over {heads} heads for input [{r},{d}]",
                table.rows(),
                table.pairs()
            )));
        }
        let mut out = self.value(x).clone();
        table.apply(out.data_mut(), heads, false);
        Ok(self.push(Op::Rotate { x, table, heads }, out, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape(format!("concat_rows widths {c} vs {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(Op::SliceRows { x, start }, out, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols rows {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("cols {start}..{} of width {c}", start + len)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(Op::SliceCols { x, start }, out, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(Op::Mean(x), out, &[x])
    }

    /// Mean of `(a - b)^2` over all coordinates.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean softmax cross-entropy of `logits: [N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape(format!(
                "{} labels for {n} rows of {c} classes",
                labels.len()
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            loss -= row[labels[r]] - max - z.ln();
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
            &[logits],
        ))
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    /// Leaves the loss does not reach get a zero gradient.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        Ok(wrt
            .iter()
            .map(|&v| {
                grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
            })
            .collect())
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |buf| add_into(buf, gd));
                self.accumulate(grads, *b, |buf| add_into(buf, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |buf| add_into(buf, gd));
                self.accumulate(grads, *b, |buf| {
                    for (o, x) in buf.iter_mut().zip(gd) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, |buf| add_into(buf, gd));
                let c = g.cols();
                self.accumulate(grads, *bias, |buf| {
                    for row in gd.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |buf| {
                    for (o, v) in buf.iter_mut().zip(gd) {
                        *o += s * v;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.accumulate(grads, *a, |buf| matmul_a_bt_into(gd, bv.data(), buf, m, k, n));
                self.accumulate(grads, *b, |buf| matmul_at_b_into(av.data(), gd, buf, m, k, n));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |buf| {
                    for ((o, gv), &xi) in buf.iter_mut().zip(gd).zip(xv) {
                        *o += gv * gelu_grad(xi);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let rows = g.rows();
                let gain_v = self.value(*gain).data();
                self.accumulate(grads, *gain, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |buf| {
                    for row in gd.chunks(d) {
                        add_into(buf, row);
                    }
                });
                self.accumulate(grads, *x, |buf| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = gd[r * d + j] * gain_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[r * d + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            buf[r * d + j] +=
                                rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, mask, *heads, probs, gd, grads),
            Op::Rotate { x, table, heads } => {
                let mut back = g.clone();
                table.apply(back.data_mut(), *heads, true);
                self.accumulate(grads, *x, |buf| add_into(buf, back.data()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |buf| add_into(buf, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = g.cols();
                let off = start * c;
                self.accumulate(grads, *x, |buf| add_into(&mut buf[off..off + gd.len()], gd));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.accumulate(grads, p, |buf| {
                        for (r, dst) in buf.chunks_mut(pc).enumerate() {
                            add_into(dst, &gd[r * total + col..r * total + col + pc]);
                        }
                    });
                    col += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let len = g.cols();
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |buf| {
                    for (r, src) in gd.chunks(len).enumerate() {
                        add_into(&mut buf[r * c + start..r * c + start + len], src);
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / self.value(*x).len() as f64;
                self.accumulate(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = gd[0] / n as f64;
                self.accumulate(grads, *logits, |buf| {
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            buf[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        heads: usize,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.shape()[0], qv.shape()[1]);
        let s = kv.shape()[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; s * d];
        let mut gv = vec![0.0; s * d];
        let mut dp = vec![0.0; s];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[(h * t + i) * s..(h * t + i + 1) * s];
                let gi = &gd[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..s {
                    if !mask.allows(i, j) {
                        continue;
                    }
                    let vj = &vv.data()[j * d + off..j * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    for (o, &x) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *o += p[j] * x;
                    }
                }
                let qi = &qv.data()[i * d + off..i * d + off + dh];
                for j in 0..s {
                    if !mask.allows(i, j) {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &kv.data()[j * d + off..j * d + off + dh];
                    for (o, &x) in gq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    for (o, &x) in gk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        self.accumulate(grads, q, |buf| add_into(buf, &gq));
        self.accumulate(grads, k, |buf| add_into(buf, &gk));
        self.accumulate(grads, v, |buf| add_into(buf, &gv));
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(buf.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}
