//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and appends a node to the tape. `backward`
//! walks the tape once in reverse. Ops are coarse (matmul, fused attention,
//! layer norm) so the tape stays a few thousand nodes for a full model step.

use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of one row in [`Graph::embed`].
#[derive(Clone, Copy, Debug)]
pub enum RowSource<'a> {
    /// Row `id` of the table.
    Table(usize),
    /// A constant row (no gradient flows back from it).
    Fixed(&'a [f64]),
}

/// Batch layout for [`Graph::causal_attention`].
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags; `false` marks a padding key that is never attended.
    pub key_mask: Option<Vec<bool>>,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    /// `y_i = f(x_i)` with the local derivative `f'(x_i)` stored.
    Unary {
        x: Var,
        deriv: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    Embed {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    Attention {
        qkv: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients returned by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros if `v` did not
    /// participate in the output.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Row-wise log-softmax on plain slices; shared with the inference path.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    log_softmax_row(x, &mut out);
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, &mut out);
    out
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

pub const LAYER_NORM_EPS: f64 = 1e-10;

/// GELU (tanh approximation) and its derivative.
pub fn gelu_with_derivative(v: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * v * v);
    (0.5 * v * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
}

/// In-place row normalization, the forward rule of [`Graph::layer_norm`].
pub fn layer_norm_in_place(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * s;
    }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Error if any forward value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul: inner dimensions {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(av.data(), false, bv.data(), false, &mut out, m, k, n, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), rg, Op::MatMul { a, b }, "matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, name: &'static str) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{name}: shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y, "add");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y, "sub");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y, "mul");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Mul { a, b }, "mul")
    }

    /// `x[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.cols();
        assert_eq!(rv.len(), n, "add_row: row width");
        let mut out = xv.clone();
        for r in out.data_mut().chunks_mut(n) {
            for (o, b) in r.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, rg, Op::AddRow { x, row }, "add_row")
    }

    /// `x[i, :] ⊙ row` for every row `i`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.cols();
        assert_eq!(rv.len(), n, "mul_row: row width");
        let mut out = xv.clone();
        for r in out.data_mut().chunks_mut(n) {
            for (o, g) in r.iter_mut().zip(rv.data()) {
                *o *= g;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, rg, Op::MulRow { x, row }, "mul_row")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale { x, factor }, "scale")
    }

    /// Elementwise map. `f(i, x_i)` returns `(y_i, dy_i/dx_i)`.
    pub fn map(&mut self, x: Var, name: &'static str, f: impl Fn(usize, f64) -> (f64, f64)) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut deriv = Vec::with_capacity(xv.len());
        for (i, &v) in xv.data().iter().enumerate() {
            let (y, d) = f(i, v);
            out.push(y);
            deriv.push(d);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::Unary { x, deriv }, name)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, "tanh", |_, v| {
            let t = v.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, "exp", |_, v| {
            let e = v.exp();
            (e, e)
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, "square", |_, v| (v * v, 2.0 * v))
    }

    /// Clamp into `[lo, hi]`; zero derivative outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, "clamp", move |_, v| {
            if v < lo {
                (lo, 0.0)
            } else if v > hi {
                (hi, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, "gelu", |_, v| gelu_with_derivative(v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Scalar `Σ_i weights_i · x_i`.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "dot_const: length");
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Dot { x, weights }, "dot")
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + width <= n, "slice_cols: out of range");
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(m, width, out), rg, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; m * n];
        let mut rstd = Vec::with_capacity(m);
        for (r, o) in out.chunks_mut(n).enumerate() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (oi, v) in o.iter_mut().zip(row) {
                *oi = (v - mean) * s;
            }
            rstd.push(s);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(m, n, out), rg, Op::LayerNorm { x, rstd }, "layer_norm")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for (o, r) in out.data_mut().chunks_mut(n).zip(xv.data().chunks(n)) {
            softmax_row(r, o);
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::Softmax { x }, "softmax")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for (o, r) in out.data_mut().chunks_mut(n).zip(xv.data().chunks(n)) {
            log_softmax_row(r, o);
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::LogSoftmax { x }, "log_softmax")
    }

    /// Gather flat elements into a vector.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Var {
        assert!(!index.is_empty(), "pick: empty index");
        let xv = self.value(x);
        let out: Vec<f64> = index.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(out), rg, Op::Pick { x, index }, "pick")
    }

    /// Build a `rows × d` matrix from table rows and fixed rows.
    pub fn embed(&mut self, table: Var, sources: &[RowSource<'_>]) -> Var {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        assert!(!sources.is_empty(), "embed: no rows");
        let mut out = Vec::with_capacity(sources.len() * d);
        let mut ids = Vec::with_capacity(sources.len());
        for s in sources {
            match *s {
                RowSource::Table(id) => {
                    assert!(id < v, "embed: row {id} out of range {v}");
                    out.extend_from_slice(tv.row(id));
                    ids.push(Some(id));
                }
                RowSource::Fixed(row) => {
                    assert_eq!(row.len(), d, "embed: fixed row width");
                    out.extend_from_slice(row);
                    ids.push(None);
                }
            }
        }
        let rg = self.rg(table);
        self.push(Tensor::matrix(sources.len(), d, out), rg, Op::Embed { table, ids }, "embed")
    }

    /// Multi-head causal self-attention over a packed `[batch*seq, 3d]`
    /// projection holding `q | k | v`. Output is `[batch*seq, d]`.
    pub fn causal_attention(&mut self, qkv: Var, layout: AttentionLayout) -> Var {
        let xv = self.value(qkv);
        let (b, t, h) = (layout.batch, layout.seq, layout.heads);
        assert_eq!(xv.rows(), b * t, "attention: rows != batch*seq");
        assert_eq!(xv.cols() % (3 * h), 0, "attention: width not divisible by 3*heads");
        if let Some(m) = &layout.key_mask {
            assert_eq!(m.len(), b * t, "attention: key mask length");
        }
        let d = xv.cols() / 3;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let w = 3 * d;
        let x = xv.data();
        let mut out = vec![0.0; b * t * d];
        let mut probs = vec![0.0; b * h * t * t];
        let mut scores = vec![0.0; t];
        for bi in 0..b {
            for hi in 0..h {
                let (qo, ko, vo) = (hi * dh, d + hi * dh, 2 * d + hi * dh);
                for i in 0..t {
                    let qrow = &x[(bi * t + i) * w + qo..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let valid = layout.key_mask.as_ref().is_none_or(|m| m[bi * t + j]);
                        if valid {
                            let krow = &x[(bi * t + j) * w + ko..][..dh];
                            let s = super::kernels::dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((bi * h + hi) * t + i) * t..][..t];
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let e = if scores[j] == f64::NEG_INFINITY { 0.0 } else { (scores[j] - max).exp() };
                        p[j] = e;
                        sum += e;
                    }
                    let orow = &mut out[(bi * t + i) * d + hi * dh..][..dh];
                    for j in 0..=i {
                        p[j] /= sum;
                        if p[j] != 0.0 {
                            let vrow = &x[(bi * t + j) * w + vo..][..dh];
                            for (o, vv) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        self.push(Tensor::matrix(b * t, d, out), rg, Op::Attention { qkv, layout, probs }, "attention")
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_finite()?;
        let out_shape = self.shape(output);
        if self.value(output).len() != 1 {
            return Err(Error::NonScalar(out_shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad || !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            } else if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = slot!(*a) {
                    gemm(g, false, bv.data(), true, ga, m, n, k, true);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(av.data(), true, g, false, gb, k, m, n, true);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(s) = slot!(*v) {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(s) = slot!(*b) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if a == b {
                    if let Some(s) = slot!(*a) {
                        for i in 0..s.len() {
                            s[i] += 2.0 * g[i] * av[i];
                        }
                    }
                } else {
                    if let Some(s) = slot!(*a) {
                        for i in 0..s.len() {
                            s[i] += g[i] * bv[i];
                        }
                    }
                    if let Some(s) = slot!(*b) {
                        for i in 0..s.len() {
                            s[i] += g[i] * av[i];
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                let n = nodes[row.0].value.len();
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(s) = slot!(*row) {
                    for r in g.chunks(n) {
                        s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let rv = nodes[row.0].value.data();
                let xv = nodes[x.0].value.data();
                let n = rv.len();
                if let Some(s) = slot!(*x) {
                    for (i, (a, b)) in s.iter_mut().zip(g).enumerate() {
                        *a += b * rv[i % n];
                    }
                }
                if let Some(s) = slot!(*row) {
                    for (gr, xr) in g.chunks(n).zip(xv.chunks(n)) {
                        for j in 0..n {
                            s[j] += gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor);
                }
            }
            Op::Unary { x, deriv } => {
                if let Some(s) = slot!(*x) {
                    for i in 0..s.len() {
                        s[i] += g[i] * deriv[i];
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Dot { x, weights } => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(weights).for_each(|(a, w)| *a += g[0] * w);
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.cols();
                let width = node.value.cols();
                if let Some(s) = slot!(*x) {
                    for (r, gr) in g.chunks(width).enumerate() {
                        for (j, v) in gr.iter().enumerate() {
                            s[r * n + start + j] += v;
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(s) = slot!(*x) {
                    for (r, ((gr, yr), sr)) in g.chunks(n).zip(y.chunks(n)).zip(s.chunks_mut(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            sr[j] += rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(s) = slot!(*x) {
                    for ((gr, yr), sr) in g.chunks(n).zip(y.chunks(n)).zip(s.chunks_mut(n)) {
                        let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            sr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(s) = slot!(*x) {
                    for ((gr, yr), sr) in g.chunks(n).zip(y.chunks(n)).zip(s.chunks_mut(n)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            sr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Pick { x, index } => {
                if let Some(s) = slot!(*x) {
                    for (gv, &i) in g.iter().zip(index) {
                        s[i] += gv;
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = node.value.cols();
                if let Some(s) = slot!(*table) {
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            let dst = &mut s[id * d..(id + 1) * d];
                            dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Attention { qkv, layout, probs } => {
                let Some(s) = slot!(*qkv) else { return };
                let xv = nodes[qkv.0].value.data();
                let (b, t, h) = (layout.batch, layout.seq, layout.heads);
                let d = node.value.cols();
                let dh = d / h;
                let w = 3 * d;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dp = vec![0.0; t];
                for bi in 0..b {
                    for hi in 0..h {
                        let (qo, ko, vo) = (hi * dh, d + hi * dh, 2 * d + hi * dh);
                        for i in 0..t {
                            let p = &probs[((bi * h + hi) * t + i) * t..][..t];
                            let grow = &g[(bi * t + i) * d + hi * dh..][..dh];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vrow = &xv[(bi * t + j) * w + vo..][..dh];
                                dp[j] = super::kernels::dot(grow, vrow);
                                weighted += p[j] * dp[j];
                                let dv = &mut s[(bi * t + j) * w + vo..][..dh];
                                for (a, gg) in dv.iter_mut().zip(grow) {
                                    *a += p[j] * gg;
                                }
                            }
                            for j in 0..=i {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let qi = (bi * t + i) * w + qo;
                                let kj = (bi * t + j) * w + ko;
                                for c in 0..dh {
                                    s[qi + c] += ds * xv[kj + c];
                                    s[kj + c] += ds * xv[qi + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
