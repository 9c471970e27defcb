//! Reverse-mode automatic differentiation over row-batched matrices.
//!
//! A [`Graph`] records every operation of one forward pass on a tape. Calling
//! [`Graph::backward`] walks the tape in reverse and produces gradients for
//! every parameter leaf. Sequences of different samples are stacked along the
//! row axis; operations that must not mix samples (attention, PPEG) take the
//! per-sample segment lengths explicitly.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu { x: Var, slope: Vec<f64> },
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    L2NormRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Attention { qkv: Var, segments: Vec<usize>, heads: usize, probs: Vec<f64> },
    Ppeg { x: Var, k3: Var, k5: Var, k7: Var, segments: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    frozen: Option<&'p [bool]>,
}

/// Gradients of one scalar output with respect to every parameter that was used.
pub struct Gradients {
    per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Tensor> {
        self.per_param.get_mut(id.0).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.per_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.is_empty()
    }
}

/// Per-segment row offsets.
fn offsets(segments: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(segments.len());
    let mut acc = 0;
    for &s in segments {
        out.push(acc);
        acc += s;
    }
    out
}

fn grid_side(n: usize) -> usize {
    let mut m = (n as f64).sqrt().ceil() as usize;
    while m * m < n {
        m += 1;
    }
    while m > 1 && (m - 1) * (m - 1) >= n {
        m -= 1;
    }
    m.max(1)
}

/// Sum of the 3x3, 5x5 and 7x7 depthwise kernels embedded in a 7x7 window,
/// laid out as `[49 × channels]`.
fn combined_kernel(k3: &Tensor, k5: &Tensor, k7: &Tensor) -> Tensor {
    let d = k7.rows();
    let mut out = Tensor::zeros(49, d);
    for c in 0..d {
        for dy in 0..7 {
            for dx in 0..7 {
                let mut v = k7.get(c, dy * 7 + dx);
                if (1..6).contains(&dy) && (1..6).contains(&dx) {
                    v += k5.get(c, (dy - 1) * 5 + (dx - 1));
                }
                if (2..5).contains(&dy) && (2..5).contains(&dx) {
                    v += k3.get(c, (dy - 2) * 3 + (dx - 2));
                }
                out.set(dy * 7 + dx, c, v);
            }
        }
    }
    out
}

/// tanh through one `exp`; cheaper than libm's tanh and exact enough here.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

/// GELU (tanh form) and its derivative.
fn gelu_and_slope(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()], frozen: None }
    }

    /// Parameters flagged `true` in `frozen` are treated as constants.
    pub fn with_frozen(store: &'p ParamStore, frozen: &'p [bool]) -> Self {
        assert_eq!(frozen.len(), store.len());
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()], frozen: Some(frozen) }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let frozen = self.frozen.is_some_and(|f| f[id.0]);
        let v = self.push(self.store.get(id).clone(), Op::Param(id), !frozen);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "matmul_nt inner dimension mismatch");
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(
            MatRef::new(ta.data(), ta.rows(), ta.cols()),
            MatRef::new(tb.data(), tb.rows(), tb.cols()).t(),
            MatMut::new(out.data_mut(), ta.rows(), tb.rows()),
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows(), 1, "add_row expects a row vector");
        assert_eq!(ta.cols(), tb.cols(), "add_row width mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += v;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ng = self.ng(a);
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        let mut slope = if ng { vec![0.0; x.len()] } else { Vec::new() };
        for (i, (o, &v)) in out.data_mut().iter_mut().zip(x.data()).enumerate() {
            let (y, dy) = gelu_and_slope(v);
            *o = y;
            if ng {
                slope[i] = dy;
            }
        }
        self.push(out, Op::Gelu { x: a, slope }, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::full(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        assert_eq!(tg.shape(), (1, d));
        assert_eq!(tb.shape(), (1, d));
        let mut out = Tensor::zeros(tx.rows(), d);
        let mut mean = Vec::with_capacity(tx.rows());
        let mut rstd = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = (row[c] - m) * rs * tg.data()[c] + tb.data()[c];
            }
            mean.push(m);
            rstd.push(rs);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormRows { x: a, norms }, ng)
    }

    /// Mean over rows of `-log softmax(logits_r)[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len(), "one target per row");
        let mut probs = t.clone();
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = t.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[target];
            softmax_in_place(probs.row_mut(r));
        }
        let out = Tensor::full(1, 1, total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Exact multi-head softmax self-attention inside each segment.
    ///
    /// `qkv` is `[rows × 3D]` holding queries, keys and values side by side;
    /// the output is `[rows × D]` before the output projection.
    pub fn attention(&mut self, qkv: Var, segments: &[usize], heads: usize) -> Var {
        let t = self.value(qkv);
        let rows = t.rows();
        assert_eq!(segments.iter().sum::<usize>(), rows, "segments must cover all rows");
        assert_eq!(t.cols() % 3, 0);
        let d = t.cols() / 3;
        assert_eq!(d % heads, 0, "model width must be divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ld = 3 * d;
        let mut out = Tensor::zeros(rows, d);
        let total_probs: usize = segments.iter().map(|&s| s * s).sum::<usize>() * heads;
        let mut probs = vec![0.0; total_probs];
        let mut poff = 0;
        for (&len, &r0) in segments.iter().zip(&offsets(segments)) {
            for h in 0..heads {
                let p = &mut probs[poff..poff + len * len];
                gemm(
                    MatRef::block(t.data(), ld, r0, h * dh, len, dh),
                    MatRef::block(t.data(), ld, r0, d + h * dh, len, dh).t(),
                    MatMut::new(p, len, len),
                    0.0,
                );
                for row in p.chunks_mut(len) {
                    row.iter_mut().for_each(|v| *v *= scale);
                    softmax_in_place(row);
                }
                gemm(
                    MatRef::new(p, len, len),
                    MatRef::block(t.data(), ld, r0, 2 * d + h * dh, len, dh),
                    MatMut::block(out.data_mut(), d, r0, h * dh, len, dh),
                    0.0,
                );
                poff += len * len;
            }
        }
        let ng = self.ng(qkv);
        self.push(out, Op::Attention { qkv, segments: segments.to_vec(), heads, probs }, ng)
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, as
    /// `probs[segment][head]` row-major `len × len` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<Vec<Vec<f64>>>> {
        match &self.nodes[v.0].op {
            Op::Attention { segments, heads, probs, .. } => {
                let mut out = Vec::with_capacity(segments.len());
                let mut off = 0;
                for &len in segments {
                    let mut per_head = Vec::with_capacity(*heads);
                    for _ in 0..*heads {
                        per_head.push(probs[off..off + len * len].to_vec());
                        off += len * len;
                    }
                    out.push(per_head);
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// Pyramid position encoding: per segment, pad to a square grid with
    /// copies of the last token, add 3x3/5x5/7x7 depthwise zero-padded
    /// convolutions to the identity path, and drop the padding again.
    pub fn ppeg(&mut self, x: Var, k3: Var, k5: Var, k7: Var, segments: &[usize]) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        assert_eq!(segments.iter().sum::<usize>(), tx.rows());
        assert_eq!(self.value(k3).shape(), (d, 9));
        assert_eq!(self.value(k5).shape(), (d, 25));
        assert_eq!(self.value(k7).shape(), (d, 49));
        let kern = combined_kernel(self.value(k3), self.value(k5), self.value(k7));
        let mut out = tx.clone();
        for (&n, &r0) in segments.iter().zip(&offsets(segments)) {
            if n == 0 {
                continue;
            }
            let m = grid_side(n);
            for p in 0..n {
                let (i, j) = ((p / m) as isize, (p % m) as isize);
                let mut acc = vec![0.0; d];
                for dy in -3isize..=3 {
                    let qi = i + dy;
                    if qi < 0 || qi >= m as isize {
                        continue;
                    }
                    for dx in -3isize..=3 {
                        let qj = j + dx;
                        if qj < 0 || qj >= m as isize {
                            continue;
                        }
                        let q = (qi as usize) * m + qj as usize;
                        let src = r0 + q.min(n - 1);
                        let krow = kern.row(((dy + 3) * 7 + dx + 3) as usize);
                        for ((a, &kv), &xv) in acc.iter_mut().zip(krow).zip(tx.row(src)) {
                            *a += kv * xv;
                        }
                    }
                }
                for (o, a) in out.row_mut(r0 + p).iter_mut().zip(acc) {
                    *o += a;
                }
            }
        }
        let ng = self.ng(x) || self.ng(k3) || self.ng(k5) || self.ng(k7);
        self.push(out, Op::Ppeg { x, k3, k5, k7, segments: segments.to_vec() }, ng)
    }

    /// Rows of `x` picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::vcat(&ts);
        let ng = parts.iter().any(|&v| self.ng(v));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let t = self.value(x);
        assert!(start + width <= t.cols());
        let mut out = Tensor::zeros(t.rows(), width);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + width]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward expects a scalar output");
        self.backward_with(output, Tensor::full(1, 1, 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut per_param: Vec<Option<Tensor>> = vec![None; self.store.len()];
        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, dy, &mut grads, &mut per_param);
        }
        Gradients { per_param }
    }

    fn backprop_node(
        &self,
        node: &Node,
        dy: Tensor,
        grads: &mut [Option<Tensor>],
        per_param: &mut [Option<Tensor>],
    ) {
        let mut acc = |v: Var, g: Tensor| accumulate(&self.nodes, grads, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut per_param[id.0] {
                Some(existing) => existing.add_assign(&dy),
                slot @ None => *slot = Some(dy),
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dyr = MatRef::new(dy.data(), dy.rows(), dy.cols());
                let ar = MatRef::new(ta.data(), ta.rows(), ta.cols());
                let br = MatRef::new(tb.data(), tb.rows(), tb.cols());
                gemm_into(&self.nodes, grads, *a, dyr, br.t());
                gemm_into(&self.nodes, grads, *b, ar.t(), dyr);
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dyr = MatRef::new(dy.data(), dy.rows(), dy.cols());
                let ar = MatRef::new(ta.data(), ta.rows(), ta.cols());
                let br = MatRef::new(tb.data(), tb.rows(), tb.cols());
                gemm_into(&self.nodes, grads, *a, dyr, br);
                gemm_into(&self.nodes, grads, *b, dyr.t(), ar);
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    acc(*b, dy.clone());
                }
                acc(*a, dy);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    acc(*b, dy.map(|v| -v));
                }
                acc(*a, dy);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    acc(*a, Tensor::from_vec(dy.rows(), dy.cols(), d));
                }
                if self.ng(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    acc(*b, Tensor::from_vec(dy.rows(), dy.cols(), d));
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*b) {
                    let mut db = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(*b, db);
                }
                acc(*a, dy);
            }
            Op::Scale(a, s) => acc(*a, dy.map(|v| v * s)),
            Op::Gelu { x, slope } => {
                let mut dx = dy;
                dx.data_mut().iter_mut().zip(slope).for_each(|(g, s)| *g *= s);
                acc(*x, dx);
            }
            Op::Exp(a) => {
                let d = dy.data().iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                acc(*a, Tensor::from_vec(dy.rows(), dy.cols(), d));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = dy.data().iter().zip(x.data()).map(|(g, v)| g / v).collect();
                acc(*a, Tensor::from_vec(dy.rows(), dy.cols(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect();
                acc(*a, Tensor::from_vec(dy.rows(), dy.cols(), d));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::full(r, c, dy.data()[0]));
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let d = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), d);
                let mut dg = Tensor::zeros(1, d);
                let mut db = Tensor::zeros(1, d);
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..tx.rows() {
                    let row = tx.row(r);
                    let g = dy.row(r);
                    for c in 0..d {
                        xhat[c] = (row[c] - mean[r]) * rstd[r];
                        dxhat[c] = g[c] * tg.data()[c];
                        dg.data_mut()[c] += g[c] * xhat[c];
                        db.data_mut()[c] += g[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let o = dx.row_mut(r);
                    for c in 0..d {
                        o[c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = dy.data()[0] / targets.len() as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, dl);
            }
            Op::Attention { qkv, segments, heads, probs } => {
                let t = self.value(*qkv);
                let d = t.cols() / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let ld = 3 * d;
                let mut dqkv = Tensor::zeros(t.rows(), t.cols());
                let mut poff = 0;
                for (&len, &r0) in segments.iter().zip(&offsets(segments)) {
                    let mut dp = vec![0.0; len * len];
                    for h in 0..*heads {
                        let p = &probs[poff..poff + len * len];
                        poff += len * len;
                        // dV = Pᵀ dO
                        gemm(
                            MatRef::new(p, len, len).t(),
                            MatRef::block(dy.data(), d, r0, h * dh, len, dh),
                            MatMut::block(dqkv.data_mut(), ld, r0, 2 * d + h * dh, len, dh),
                            0.0,
                        );
                        // dP = dO Vᵀ
                        gemm(
                            MatRef::block(dy.data(), d, r0, h * dh, len, dh),
                            MatRef::block(t.data(), ld, r0, 2 * d + h * dh, len, dh).t(),
                            MatMut::new(&mut dp, len, len),
                            0.0,
                        );
                        // softmax backward, folded with the score scale
                        for (prow, drow) in p.chunks(len).zip(dp.chunks_mut(len)) {
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        // dQ = dS K
                        gemm(
                            MatRef::new(&dp, len, len),
                            MatRef::block(t.data(), ld, r0, d + h * dh, len, dh),
                            MatMut::block(dqkv.data_mut(), ld, r0, h * dh, len, dh),
                            0.0,
                        );
                        // dK = dSᵀ Q
                        gemm(
                            MatRef::new(&dp, len, len).t(),
                            MatRef::block(t.data(), ld, r0, h * dh, len, dh),
                            MatMut::block(dqkv.data_mut(), ld, r0, d + h * dh, len, dh),
                            0.0,
                        );
                    }
                }
                acc(*qkv, dqkv);
            }
            Op::Ppeg { x, k3, k5, k7, segments } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let kern = combined_kernel(self.value(*k3), self.value(*k5), self.value(*k7));
                let mut dx = dy.clone();
                let mut dkern = Tensor::zeros(49, d);
                for (&n, &r0) in segments.iter().zip(&offsets(segments)) {
                    if n == 0 {
                        continue;
                    }
                    let m = grid_side(n);
                    for p in 0..n {
                        let (i, j) = ((p / m) as isize, (p % m) as isize);
                        let g = dy.row(r0 + p).to_vec();
                        for dyo in -3isize..=3 {
                            let qi = i + dyo;
                            if qi < 0 || qi >= m as isize {
                                continue;
                            }
                            for dxo in -3isize..=3 {
                                let qj = j + dxo;
                                if qj < 0 || qj >= m as isize {
                                    continue;
                                }
                                let q = (qi as usize) * m + qj as usize;
                                let src = r0 + q.min(n - 1);
                                let k = ((dyo + 3) * 7 + dxo + 3) as usize;
                                let xs = tx.row(src);
                                for (o, (&gv, &xv)) in dkern.row_mut(k).iter_mut().zip(g.iter().zip(xs)) {
                                    *o += gv * xv;
                                }
                                let krow = kern.row(k);
                                for (o, (&gv, &kv)) in dx.row_mut(src).iter_mut().zip(g.iter().zip(krow)) {
                                    *o += gv * kv;
                                }
                            }
                        }
                    }
                }
                let mut d3 = Tensor::zeros(d, 9);
                let mut d5 = Tensor::zeros(d, 25);
                let mut d7 = Tensor::zeros(d, 49);
                for c in 0..d {
                    for ky in 0..7 {
                        for kx in 0..7 {
                            let g = dkern.get(ky * 7 + kx, c);
                            d7.set(c, ky * 7 + kx, g);
                            if (1..6).contains(&ky) && (1..6).contains(&kx) {
                                d5.set(c, (ky - 1) * 5 + kx - 1, g);
                            }
                            if (2..5).contains(&ky) && (2..5).contains(&kx) {
                                d3.set(c, (ky - 2) * 3 + kx - 2, g);
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*k3, d3);
                acc(*k5, d5);
                acc(*k7, d7);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &g) in dx.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.ng(p) {
                        let slice = dy.data()[r0 * cols..(r0 + rows) * cols].to_vec();
                        acc(p, Tensor::from_vec(rows, cols, slice));
                    }
                    r0 += rows;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                let w = dy.cols();
                for r in 0..dy.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                }
                acc(*x, dx);
            }
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adds `a · b` into the gradient slot of `v`, allocating it on first use.
fn gemm_into(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, a: MatRef<'_>, b: MatRef<'_>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let (rows, cols) = nodes[v.0].value.shape();
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
    gemm(a, b, MatMut::new(slot.data_mut(), rows, cols), 1.0);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
