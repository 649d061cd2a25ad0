//! Minimal reverse-mode automatic differentiation over batched matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are
//! either constants or parameters; only nodes downstream of a parameter
//! take part in the backward sweep.

use std::sync::Arc;

use crate::kernels::{self, BatchedLinearShape, ConvShape};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed linear map applied independently to each row: `(out, in, weight)` triples.
pub type SparseRowMap = Vec<(usize, usize, f64)>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Silu(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    AddChannels(Var, Var, usize),
    Conv3x3(Var, Var, Var, ConvShape),
    AvgPool2(Var, usize, usize, usize),
    Upsample2(Var, usize, usize, usize),
    BatchedLinear(Var, Var, Var, BatchedLinearShape),
    SpectralNorm {
        w: Var,
        din: usize,
        dout: usize,
        u: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        sigma: Vec<f64>,
    },
    SparseMap(Var, Arc<Vec<SparseRowMap>>),
    DotConst(Var, Mat),
    SqErrMean(Var, Mat),
    SoftmaxXent(Var, Vec<usize>, Mat),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Power iteration count for spectral normalization.
const POWER_ITERS: usize = 30;

/// Largest singular value of a `din×dout` row-major matrix with its
/// singular vectors. Starts from a fixed vector, so it is deterministic.
pub fn top_singular(w: &[f64], din: usize, dout: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut v = vec![1.0 / (dout as f64).sqrt(); dout];
    let mut u = vec![0.0; din];
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERS {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..dout).map(|j| w[i * dout + j] * v[j]).sum();
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|x| *x /= nu);
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..din).map(|i| w[i * dout + j] * u[i]).sum();
        }
        sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= sigma);
    }
    (sigma, u, v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Mat, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::matmul(self.value(a), self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(value, Op::MatMul(a, b), r)
    }

    /// Adds a `1×c` bias to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "add_bias: bias must be a single row");
        let mut value = self.value(a).clone();
        let c = value.cols();
        assert_eq!(bv.cols(), c, "add_bias: width mismatch");
        for row in value.data_mut().chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let r = self.req(a) || self.req(bias);
        self.push(value, Op::AddBias(a, bias), r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(value, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(value, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let r = self.req(a) || self.req(b);
        self.push(value, Op::Mul(a, b), r)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let r = self.req(a);
        self.push(value, Op::Scale(a, s), r)
    }

    /// Multiplies row `i` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.rows(), s.len(), "scale_rows: length mismatch");
        for (i, si) in s.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|x| *x *= si);
        }
        let r = self.req(a);
        self.push(value, Op::ScaleRows(a, s), r)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let r = self.req(a);
        self.push(value, Op::Silu(a), r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let r = self.req(a);
        self.push(value, Op::Tanh(a), r)
    }

    /// Concatenates along columns; all parts share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat: row mismatch");
                value.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        let req = parts.iter().any(|&p| self.req(p));
        self.push(value, Op::Concat(parts.to_vec()), req)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut value = Mat::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let req = self.req(a);
        self.push(value, Op::SliceCols(a, start), req)
    }

    /// Row lookup into `table` (embedding).
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let value = self.value(table).select_rows(&idx);
        let r = self.req(table);
        self.push(value, Op::Gather(table, idx), r)
    }

    /// Adds `c[b][ch]` to every spatial position of channel `ch` in `a`.
    pub fn add_channels(&mut self, a: Var, c: Var, hw: usize) -> Var {
        let mut value = self.value(a).clone();
        let cv = self.value(c);
        assert_eq!(value.cols(), cv.cols() * hw, "add_channels: width mismatch");
        for b in 0..value.rows() {
            let cr = cv.row(b).to_vec();
            for (ch, chunk) in value.row_mut(b).chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|x| *x += cr[ch]);
            }
        }
        let r = self.req(a) || self.req(c);
        self.push(value, Op::AddChannels(a, c, hw), r)
    }

    /// 3×3 convolution; `w` is `1×(cout·cin·9)`, `b` is `1×cout`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, s: ConvShape) -> Var {
        let value = kernels::conv3x3(self.value(x), self.value(w).data(), self.value(b).data(), s);
        let r = self.req(x) || self.req(w) || self.req(b);
        self.push(value, Op::Conv3x3(x, w, b, s), r)
    }

    pub fn avg_pool2(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let value = kernels::avg_pool2(self.value(x), c, h, w);
        let r = self.req(x);
        self.push(value, Op::AvgPool2(x, c, h, w), r)
    }

    pub fn upsample2(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let value = kernels::upsample2(self.value(x), c, h, w);
        let r = self.req(x);
        self.push(value, Op::Upsample2(x, c, h, w), r)
    }

    pub fn batched_linear(&mut self, x: Var, w: Var, b: Var, s: BatchedLinearShape) -> Var {
        let value = kernels::batched_linear(self.value(x), self.value(w), self.value(b), s);
        let r = self.req(x) || self.req(w) || self.req(b);
        self.push(value, Op::BatchedLinear(x, w, b, s), r)
    }

    /// Divides each row's `din×dout` weight matrix by its largest singular value.
    pub fn spectral_norm(&mut self, w: Var, din: usize, dout: usize) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.cols(), din * dout, "spectral_norm: width mismatch");
        let mut value = wv.clone();
        let mut us = Vec::with_capacity(wv.rows());
        let mut vs = Vec::with_capacity(wv.rows());
        let mut sigmas = Vec::with_capacity(wv.rows());
        for b in 0..wv.rows() {
            let (s, u, v) = top_singular(wv.row(b), din, dout);
            value.row_mut(b).iter_mut().for_each(|x| *x /= s);
            us.push(u);
            vs.push(v);
            sigmas.push(s);
        }
        let r = self.req(w);
        self.push(
            value,
            Op::SpectralNorm {
                w,
                din,
                dout,
                u: us,
                v: vs,
                sigma: sigmas,
            },
            r,
        )
    }

    /// Applies a fixed sparse linear map per row. A single map is shared by
    /// every row; otherwise there must be one map per row.
    pub fn sparse_map(&mut self, x: Var, maps: Arc<Vec<SparseRowMap>>, out_cols: usize) -> Var {
        let xv = self.value(x);
        assert!(maps.len() == 1 || maps.len() == xv.rows(), "sparse_map: map count mismatch");
        let mut value = Mat::zeros(xv.rows(), out_cols);
        for b in 0..xv.rows() {
            let m = &maps[if maps.len() == 1 { 0 } else { b }];
            let xr = xv.row(b);
            let o = value.row_mut(b);
            for &(oi, ii, wt) in m {
                o[oi] += wt * xr[ii];
            }
        }
        let r = self.req(x);
        self.push(value, Op::SparseMap(x, maps), r)
    }

    /// `Σ a ⊙ c` with `c` held constant.
    pub fn dot_const(&mut self, a: Var, c: Mat) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "dot_const: shape mismatch");
        let s: f64 = av.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        let r = self.req(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::DotConst(a, c), r)
    }

    /// Mean over rows of the squared L2 distance to `target`.
    pub fn sq_err_mean(&mut self, a: Var, target: Mat) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "sq_err_mean: shape mismatch");
        let rows = av.rows().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / rows;
        let r = self.req(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SqErrMean(a, target), r)
    }

    /// Mean softmax cross-entropy of `logits` against integer `labels`.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let mut probs = Mat::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for b in 0..lv.rows() {
            let row = lv.row(b);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for (p, x) in probs.row_mut(b).iter_mut().zip(row) {
                *p = (x - m).exp() / z;
            }
            loss -= row[labels[b]] - m - z.ln();
        }
        loss /= lv.rows().max(1) as f64;
        let r = self.req(logits);
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::SoftmaxXent(logits, labels, probs), r)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let r = self.req(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), r)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.req(*a) {
                    acc(*a, kernels::matmul_a_bt(g, self.value(*b)));
                }
                if self.req(*b) {
                    acc(*b, kernels::matmul_at_b(self.value(*a), g));
                }
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.clone());
                if self.req(*bias) {
                    let mut db = Mat::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::ScaleRows(a, s) => {
                let mut d = g.clone();
                for (i, si) in s.iter().enumerate() {
                    d.row_mut(i).iter_mut().for_each(|x| *x *= si);
                }
                acc(*a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.req(p) {
                        let mut d = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::Gather(table, idx) => {
                let tv = self.value(*table);
                let mut d = Mat::zeros(tv.rows(), tv.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                acc(*table, d);
            }
            Op::AddChannels(a, c, hw) => {
                acc(*a, g.clone());
                if self.req(*c) {
                    let cv = self.value(*c);
                    let mut d = Mat::zeros(cv.rows(), cv.cols());
                    for b in 0..g.rows() {
                        for (ch, chunk) in g.row(b).chunks(*hw).enumerate() {
                            d.set(b, ch, chunk.iter().sum());
                        }
                    }
                    acc(*c, d);
                }
            }
            Op::Conv3x3(x, w, b, s) => {
                if self.req(*x) {
                    acc(*x, kernels::conv3x3_grad_input(g, self.value(*w).data(), *s));
                }
                if self.req(*w) || self.req(*b) {
                    let (dw, db) = kernels::conv3x3_grad_params(self.value(*x), g, *s);
                    acc(*w, Mat::from_vec(1, dw.len(), dw));
                    acc(*b, Mat::from_vec(1, db.len(), db));
                }
            }
            Op::AvgPool2(x, c, h, w) => acc(*x, kernels::avg_pool2_grad(g, *c, *h, *w)),
            Op::Upsample2(x, c, h, w) => acc(*x, kernels::upsample2_grad(g, *c, *h, *w)),
            Op::BatchedLinear(x, w, b, s) => {
                let (dx, dw, db) =
                    kernels::batched_linear_grad(self.value(*x), self.value(*w), g, *s);
                acc(*x, dx);
                acc(*w, dw);
                if self.value(*b).rows() == 1 && db.rows() != 1 {
                    let mut sum = Mat::zeros(1, db.cols());
                    for row in db.iter_rows() {
                        for (a, v) in sum.data_mut().iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*b, sum);
                } else {
                    acc(*b, db);
                }
            }
            Op::SpectralNorm {
                w,
                din,
                dout,
                u,
                v,
                sigma,
            } => {
                let wv = self.value(*w);
                let mut d = Mat::zeros(wv.rows(), wv.cols());
                for b in 0..wv.rows() {
                    let wr = wv.row(b);
                    let gr = g.row(b);
                    let s = sigma[b];
                    let inner: f64 = gr.iter().zip(wr).map(|(x, y)| x * y).sum();
                    let dr = d.row_mut(b);
                    for i in 0..*din {
                        for j in 0..*dout {
                            let k = i * dout + j;
                            dr[k] = gr[k] / s - inner / (s * s) * u[b][i] * v[b][j];
                        }
                    }
                }
                acc(*w, d);
            }
            Op::SparseMap(x, maps) => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.rows(), xv.cols());
                for b in 0..xv.rows() {
                    let m = &maps[if maps.len() == 1 { 0 } else { b }];
                    let gr = g.row(b).to_vec();
                    let dr = d.row_mut(b);
                    for &(oi, ii, wt) in m {
                        dr[ii] += wt * gr[oi];
                    }
                }
                acc(*x, d);
            }
            Op::DotConst(a, c) => acc(*a, c.scale(g.get(0, 0))),
            Op::SqErrMean(a, target) => {
                let av = self.value(*a);
                let k = 2.0 * g.get(0, 0) / av.rows().max(1) as f64;
                acc(*a, av.zip_map(target, |x, y| k * (x - y)));
            }
            Op::SoftmaxXent(logits, labels, probs) => {
                let k = g.get(0, 0) / probs.rows().max(1) as f64;
                let mut d = probs.scale(k);
                for (b, &l) in labels.iter().enumerate() {
                    let cur = d.get(b, l);
                    d.set(b, l, cur - k);
                }
                acc(*logits, d);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                acc(*a, Mat::filled(av.rows(), av.cols(), g.get(0, 0)));
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.rows(), like.cols()))
    }
}
