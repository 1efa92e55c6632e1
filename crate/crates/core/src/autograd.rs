//! Minimal tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value in the model is a 2-D matrix (rows are tokens). Ops record their
//! inputs on a [`Graph`]; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients only for nodes that lead to a trainable leaf.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `[start, start + len)`.
pub type Segment = (usize, usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>, probs: Vec<Array2<f64>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Exp(Var),
    PoseActivation(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that never stores backward caches; `backward` on it is a no-op.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// `a · bᵀ`; with `b` stored as `out × in` this is a linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, factor), ng)
    }

    /// Row-wise layer normalization with affine `1 × n` gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        if !self.grad_enabled {
            xhat = Array2::zeros((0, 0));
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Multi-head scaled dot-product attention restricted to row segments.
    ///
    /// Rows inside one segment attend only to rows of the same segment; rows not
    /// covered by any segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dim();
        assert_eq!(dim % heads, 0, "width {dim} not divisible by {heads} heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, dim));
        let mut probs = Vec::new();
        for &(start, len) in &segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![start..start + len, cols.clone()]);
                let ks = kv.slice(s![start..start + len, cols.clone()]);
                let vs = vv.slice(s![start..start + len, cols.clone()]);
                let mut p = qs.dot(&ks.t());
                p *= scale;
                softmax_rows(&mut p);
                out.slice_mut(s![start..start + len, cols]).assign(&p.dot(&vs));
                if self.grad_enabled {
                    probs.push(p);
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, segments, probs }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(&[a]);
        self.push(value, Op::GatherRows(a, idx), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    /// Maps raw `n × 9` camera-head outputs to pose encodings: columns 0..4
    /// normalized to a unit quaternion, 4..7 passed through, 7..9 squashed to
    /// `(0, π)` with a scaled sigmoid.
    pub fn pose_activation(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.ncols(), 9, "pose activation expects 9 columns");
        for mut row in value.rows_mut() {
            let norm = (0..4).map(|i| row[i] * row[i]).sum::<f64>().sqrt().max(1e-12);
            for i in 0..4 {
                row[i] /= norm;
            }
            for i in 7..9 {
                row[i] = std::f64::consts::PI * sigmoid(row[i]);
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::PoseActivation(a), ng)
    }

    /// Back-propagates from seed gradients. Returns per-node gradients;
    /// entries are `None` for nodes that do not lead to a trainable leaf.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.grad_enabled {
            return Gradients { grads };
        }
        for (v, g) in seeds {
            assert_eq!(self.value(*v).dim(), g.dim(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let want = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if want(b) {
                    accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if want(a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => {
                if want(a) {
                    accumulate(grads, *a, g * *f);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                if want(beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if want(gamma) {
                    accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if want(x) {
                    let gamma_v = self.value(*gamma);
                    let dxhat = g * gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (r, ((mut out, dh), xh)) in
                        dx.rows_mut().into_iter().zip(dxhat.rows()).zip(xhat.rows()).enumerate()
                    {
                        let mean_dh = dh.sum() / n;
                        let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, d), h) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                            *o = rstd[r] * (d - mean_dh - h * mean_dh_xh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                if want(a) {
                    let mut d = self.value(*a).clone();
                    Zip::from(&mut d).and(g).for_each(|x, &gv| {
                        let x0 = *x;
                        let u = GELU_C * (x0 + 0.044715 * x0 * x0 * x0);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x0 * x0);
                        *x = gv * (0.5 * (1.0 + t) + 0.5 * x0 * (1.0 - t * t) * du);
                    });
                    accumulate(grads, *a, d);
                }
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qv.ncols();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                let mut pi = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let rows = start..start + len;
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qs = qv.slice(s![rows.clone(), cols.clone()]);
                        let ks = kv.slice(s![rows.clone(), cols.clone()]);
                        let vs = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        let mut ds = go.dot(&vs.t());
                        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                            for (d, pv) in ds_row.iter_mut().zip(p_row.iter()) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                        dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
                    }
                }
                if want(q) {
                    accumulate(grads, *q, dq);
                }
                if want(k) {
                    accumulate(grads, *k, dk);
                }
                if want(v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if want(p) {
                        accumulate(grads, *p, g.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    if want(p) {
                        accumulate(grads, *p, g.slice(s![.., offset..offset + n]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                if want(a) {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    accumulate(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if want(a) {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    accumulate(grads, *a, d);
                }
            }
            Op::GatherRows(a, idx) => {
                if want(a) {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    accumulate(grads, *a, g * &node.value);
                }
            }
            Op::PoseActivation(a) => {
                if want(a) {
                    let raw = self.value(*a);
                    let mut d = Array2::zeros(raw.dim());
                    for r in 0..raw.nrows() {
                        let norm = (0..4).map(|i| raw[[r, i]] * raw[[r, i]]).sum::<f64>().sqrt().max(1e-12);
                        let unit: Vec<f64> = (0..4).map(|i| raw[[r, i]] / norm).collect();
                        let dot: f64 = (0..4).map(|i| g[[r, i]] * unit[i]).sum();
                        for i in 0..4 {
                            d[[r, i]] = (g[[r, i]] - unit[i] * dot) / norm;
                        }
                        for i in 4..7 {
                            d[[r, i]] = g[[r, i]];
                        }
                        for i in 7..9 {
                            let sg = sigmoid(raw[[r, i]]);
                            d[[r, i]] = g[[r, i]] * std::f64::consts::PI * sg * (1.0 - sg);
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}
