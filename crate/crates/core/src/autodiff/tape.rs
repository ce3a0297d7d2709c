use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::autodiff::attention::{self, AttnLayout, AttnSpec};
use crate::error::{DreamError, Result};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Precision, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, r: usize, c: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    MulCol { a: usize, col: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    DivScalar { a: usize, s: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    Silu { a: usize },
    Softplus { a: usize },
    Square { a: usize },
    Sum { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<f64> },
    Gather { a: usize, index: Rc<Vec<Option<usize>>> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, offset: usize },
    Reshape { a: usize },
    SegmentMean { a: usize, segments: Rc<Vec<(usize, usize)>> },
    L2NormalizeRows { a: usize, norms: Vec<f64> },
    CrossEntropy { logits: usize, targets: Rc<Vec<Option<usize>>>, probs: Vec<f64> },
    Rope { a: usize, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>>, head_dim: usize },
    Attention { q: usize, k: usize, v: usize, spec: AttnSpec, layout: Rc<AttnLayout>, probs: Vec<f64> },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
    consumed: Cell<bool>,
    degenerate_rows: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does
    /// not depend on it through any differentiable path.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads
            .get(var.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but returns zeros for unreached nodes.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::F64)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
            precision,
            consumed: Cell::new(false),
            degenerate_rows: Cell::new(0),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of rows that hit the zero-norm guard in `l2_normalize_rows`.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows.get()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, mut value: Tensor, requires_grad: bool) -> Var<'_> {
        self.precision.round_slice(value.data_mut());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, mut value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        self.precision.round_slice(value.data_mut());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn note_degenerate(&self, n: usize) {
        self.degenerate_rows.set(self.degenerate_rows.get() + n);
    }

    /// Reverse pass from a one-element `loss`. The tape can be walked once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(DreamError::Contract("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(DreamError::Contract("tape already consumed by backward()".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(DreamError::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            self.precision.round_slice(&mut g);
            if nodes[i].requires_grad {
                propagate(&nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Accumulates into the gradient buffer of `id`, allocating it on first use.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            acc(nodes, grads, a, |da| add_into(da, &matmul_bt_raw(g, bv, m, n, k)));
            acc(nodes, grads, b, |db| add_into(db, &matmul_at_raw(av, g, m, k, n)));
        }
        &Op::Transpose { a, r, c } => acc(nodes, grads, a, |da| {
            for x in 0..r {
                for y in 0..c {
                    da[x * c + y] += g[y * r + x];
                }
            }
        }),
        &Op::Add { a, b } => {
            acc(nodes, grads, a, |da| add_into(da, g));
            acc(nodes, grads, b, |db| add_into(db, g));
        }
        &Op::Sub { a, b } => {
            acc(nodes, grads, a, |da| add_into(da, g));
            acc(nodes, grads, b, |db| {
                for (d, s) in db.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        &Op::Mul { a, b } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            });
            acc(nodes, grads, b, |db| {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            });
        }
        &Op::AddRow { a, row } => {
            let c = nodes[row].value.numel();
            acc(nodes, grads, a, |da| add_into(da, g));
            acc(nodes, grads, row, |dr| {
                for gr in g.chunks(c) {
                    add_into(dr, gr);
                }
            });
        }
        &Op::MulRow { a, row } => {
            let c = nodes[row].value.numel();
            let av = nodes[a].value.data();
            let rv = nodes[row].value.data();
            acc(nodes, grads, a, |da| {
                for (dr, gr) in da.chunks_mut(c).zip(g.chunks(c)) {
                    for j in 0..c {
                        dr[j] += gr[j] * rv[j];
                    }
                }
            });
            acc(nodes, grads, row, |dr| {
                for (ar, gr) in av.chunks(c).zip(g.chunks(c)) {
                    for j in 0..c {
                        dr[j] += gr[j] * ar[j];
                    }
                }
            });
        }
        &Op::MulCol { a, col } => {
            let c = nodes[a].value.cols();
            let av = nodes[a].value.data();
            let cv = nodes[col].value.data();
            acc(nodes, grads, a, |da| {
                for ((dr, gr), s) in da.chunks_mut(c).zip(g.chunks(c)).zip(cv) {
                    for (d, gi) in dr.iter_mut().zip(gr) {
                        *d += gi * s;
                    }
                }
            });
            acc(nodes, grads, col, |dc| {
                for ((d, ar), gr) in dc.iter_mut().zip(av.chunks(c)).zip(g.chunks(c)) {
                    *d += ar.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>();
                }
            });
        }
        &Op::Scale { a, c } => acc(nodes, grads, a, |da| {
            for (d, gi) in da.iter_mut().zip(g) {
                *d += c * gi;
            }
        }),
        &Op::AddConst { a } => acc(nodes, grads, a, |da| add_into(da, g)),
        &Op::DivScalar { a, s } => {
            let sv = nodes[s].value.item();
            let av = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi / sv;
                }
            });
            acc(nodes, grads, s, |ds| {
                let dot: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                ds[0] -= dot / (sv * sv);
            });
        }
        &Op::Sigmoid { a } => {
            let y = out.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            });
        }
        &Op::Gelu { a } => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi * gelu_grad(*xi);
                }
            });
        }
        &Op::Silu { a } => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    let s = sigmoid(xi);
                    *d += gi * (s + xi * s * (1.0 - s));
                }
            });
        }
        &Op::Softplus { a } => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi * sigmoid(xi);
                }
            });
        }
        &Op::Square { a } => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += 2.0 * gi * xi;
                }
            });
        }
        &Op::Sum { a } => acc(nodes, grads, a, |da| {
            for d in da.iter_mut() {
                *d += g[0];
            }
        }),
        &Op::SoftmaxRows { a } => {
            let c = out.cols();
            let y = out.data();
            acc(nodes, grads, a, |da| {
                for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let d = out.cols();
            let gv = nodes[*gain].value.data();
            acc(nodes, grads, *x, |dx| {
                let mut gh = vec![0.0; d];
                for (r, (dr, gr)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        gh[j] = gr[j] * gv[j];
                    }
                    let mean_g = gh.iter().sum::<f64>() / d as f64;
                    let mean_gx = gh.iter().zip(xh).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dr[j] += inv_std[r] * (gh[j] - mean_g - xh[j] * mean_gx);
                    }
                }
            });
            acc(nodes, grads, *gain, |dg| {
                for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * xh[j];
                    }
                }
            });
            acc(nodes, grads, *bias, |db| {
                for gr in g.chunks(d) {
                    add_into(db, gr);
                }
            });
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let d = out.cols();
            let xv = nodes[*x].value.data();
            let gv = nodes[*gain].value.data();
            acc(nodes, grads, *x, |dx| {
                for (r, ((dr, gr), xr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xv.chunks(d)).enumerate() {
                    let s = inv_rms[r];
                    let dot: f64 = (0..d).map(|j| gr[j] * gv[j] * xr[j]).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dr[j] += s * gr[j] * gv[j] - s * s * s * xr[j] * dot;
                    }
                }
            });
            acc(nodes, grads, *gain, |dg| {
                for (r, (gr, xr)) in g.chunks(d).zip(xv.chunks(d)).enumerate() {
                    for j in 0..d {
                        dg[j] += gr[j] * xr[j] * inv_rms[r];
                    }
                }
            });
        }
        Op::Gather { a, index } => acc(nodes, grads, *a, |da| {
            for (gi, src) in g.iter().zip(index.iter()) {
                if let Some(s) = src {
                    da[*s] += gi;
                }
            }
        }),
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                let slice = &g[offset..offset + len];
                acc(nodes, grads, p, |dp| add_into(dp, slice));
                offset += len;
            }
        }
        &Op::SliceRows { a, offset } => acc(nodes, grads, a, |da| {
            add_into(&mut da[offset..offset + g.len()], g);
        }),
        &Op::Reshape { a } => acc(nodes, grads, a, |da| add_into(da, g)),
        Op::SegmentMean { a, segments } => {
            let c = out.cols();
            acc(nodes, grads, *a, |da| {
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let gr = &g[s * c..(s + 1) * c];
                    let w = 1.0 / len as f64;
                    for r in start..start + len {
                        for j in 0..c {
                            da[r * c + j] += w * gr[j];
                        }
                    }
                }
            });
        }
        Op::L2NormalizeRows { a, norms } => {
            let c = out.cols();
            let y = out.data();
            acc(nodes, grads, *a, |da| {
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[r * c + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = nodes[*logits].value.cols();
            acc(nodes, grads, *logits, |dl| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let pr = &probs[r * v..(r + 1) * v];
                    let dr = &mut dl[r * v..(r + 1) * v];
                    for j in 0..v {
                        dr[j] += g[0] * pr[j];
                    }
                    dr[t] -= g[0];
                }
            });
        }
        Op::Rope { a, cos, sin, head_dim } => {
            let c = out.cols();
            let half = head_dim / 2;
            acc(nodes, grads, *a, |da| {
                for r in 0..out.rows() {
                    for h in 0..c / head_dim {
                        for p in 0..half {
                            let (cs, sn) = (cos[r * half + p], sin[r * half + p]);
                            let base = r * c + h * head_dim + 2 * p;
                            let (g0, g1) = (g[base], g[base + 1]);
                            da[base] += cs * g0 + sn * g1;
                            da[base + 1] += -sn * g0 + cs * g1;
                        }
                    }
                }
            });
        }
        Op::Attention { q, k, v, spec, layout, probs } => {
            let need = [*q, *k, *v].map(|id| nodes[id].requires_grad);
            if !need.iter().any(|&x| x) {
                return;
            }
            let (dq, dk, dv) = attention::backward(
                spec,
                layout,
                nodes[*q].value.data(),
                nodes[*k].value.data(),
                nodes[*v].value.data(),
                probs,
                g,
            );
            acc(nodes, grads, *q, |d| add_into(d, &dq));
            acc(nodes, grads, *k, |d| add_into(d, &dk));
            acc(nodes, grads, *v, |d| add_into(d, &dv));
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn id(self) -> usize {
        self.id
    }

    /// Copy of the current value.
    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn item(self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(DreamError::Contract("vars from different tapes".into()))
        }
    }

    fn map_unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.tape.push(value, op, &[self.id])
    }

    fn zip_same(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.shape() != b.shape() {
            return Err(DreamError::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let (value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(DreamError::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            (Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)), m, k, n)
        };
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: rhs.id, m, k, n }, &[self.id, rhs.id]))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (value, r, c) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.shape().len() != 2 {
                return Err(DreamError::shape("transpose", a.shape(), &[]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; r * c];
            for x in 0..r {
                for y in 0..c {
                    data[y * r + x] = a.data()[x * c + y];
                }
            }
            (Tensor::from_parts(vec![c, r], data), r, c)
        };
        Ok(self.tape.push(value, Op::Transpose { a: self.id, r, c }, &[self.id]))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.push(value, Op::Add { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(rhs, "sub", |x, y| x - y)?;
        Ok(self.tape.push(value, Op::Sub { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.push(value, Op::Mul { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    fn row_broadcast(self, row: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(row)?;
        let nodes = self.tape.nodes.borrow();
        let (a, r) = (&nodes[self.id].value, &nodes[row.id].value);
        let c = a.cols();
        if r.numel() != c {
            return Err(DreamError::shape(name, a.shape(), r.shape()));
        }
        let rv = r.data();
        let data = a
            .data()
            .chunks(c)
            .flat_map(|ar| ar.iter().zip(rv).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Adds a length-`cols` vector to every trailing row (bias add).
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.row_broadcast(row, "add_row", |x, y| x + y)?;
        Ok(self.tape.push(value, Op::AddRow { a: self.id, row: row.id }, &[self.id, row.id]))
    }

    /// Multiplies every trailing row elementwise by a length-`cols` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.row_broadcast(row, "mul_row", |x, y| x * y)?;
        Ok(self.tape.push(value, Op::MulRow { a: self.id, row: row.id }, &[self.id, row.id]))
    }

    /// Scales row `i` by `col[i]`.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(col)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, s) = (&nodes[self.id].value, &nodes[col.id].value);
            if s.numel() != a.rows() {
                return Err(DreamError::shape("mul_col", a.shape(), s.shape()));
            }
            let c = a.cols();
            let data = a
                .data()
                .chunks(c)
                .zip(s.data())
                .flat_map(|(ar, &w)| ar.iter().map(move |x| x * w))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.tape.push(value, Op::MulCol { a: self.id, col: col.id }, &[self.id, col.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map_unary(|x| c * x, Op::Scale { a: self.id, c })
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.map_unary(|x| x + c, Op::AddConst { a: self.id })
    }

    /// Divides every element by a one-element var.
    pub fn div_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, sv) = (&nodes[self.id].value, &nodes[s.id].value);
            if sv.numel() != 1 {
                return Err(DreamError::shape("div_scalar", a.shape(), sv.shape()));
            }
            let d = sv.item();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x / d).collect())
        };
        Ok(self.tape.push(value, Op::DivScalar { a: self.id, s: s.id }, &[self.id, s.id]))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_unary(sigmoid, Op::Sigmoid { a: self.id })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.map_unary(gelu, Op::Gelu { a: self.id })
    }

    pub fn silu(self) -> Var<'t> {
        self.map_unary(|x| x * sigmoid(x), Op::Silu { a: self.id })
    }

    pub fn softplus(self) -> Var<'t> {
        self.map_unary(softplus, Op::Softplus { a: self.id })
    }

    pub fn square(self) -> Var<'t> {
        self.map_unary(|x| x * x, Op::Square { a: self.id })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            Tensor::scalar(nodes[self.id].value.data().iter().sum())
        };
        self.tape.push(value, Op::Sum { a: self.id }, &[self.id])
    }

    /// Row-wise softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.softmax_rows_masked(None)
    }

    /// Row-wise softmax where `mask[i] == false` entries get zero weight.
    /// Rows with no allowed entry are all zero.
    pub fn softmax_rows_masked(self, mask: Option<Rc<Vec<bool>>>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if let Some(i) = x.first_non_finite() {
                return Err(DreamError::NonFinite {
                    what: "softmax_rows input".into(),
                    index: i,
                });
            }
            if let Some(m) = &mask {
                if m.len() != x.numel() {
                    return Err(DreamError::shape("softmax_rows mask", x.shape(), &[m.len()]));
                }
            }
            let c = x.cols();
            let mut data = vec![0.0; x.numel()];
            for (r, (xr, yr)) in x.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
                let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                softmax_into(xr, yr, allowed);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.tape.push(value, Op::SoftmaxRows { a: self.id }, &[self.id]))
    }

    /// Per-row standardization followed by elementwise gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (x, gv, bv) = (&nodes[self.id].value, &nodes[gain.id].value, &nodes[bias.id].value);
            let d = x.cols();
            if gv.numel() != d || bv.numel() != d {
                return Err(DreamError::shape("layer_norm", x.shape(), gv.shape()));
            }
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(x.rows());
            for (r, xr) in x.data().chunks(d).enumerate() {
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..d {
                    let h = (xr[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(value, op, &[self.id, gain.id, bias.id]))
    }

    /// `x / sqrt(mean(x²) + eps)` per row, then elementwise gain. A row with
    /// `mean(x²) + eps == 0` maps to zeros.
    pub fn rms_norm(self, gain: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        let (value, inv_rms) = {
            let nodes = self.tape.nodes.borrow();
            let (x, gv) = (&nodes[self.id].value, &nodes[gain.id].value);
            let d = x.cols();
            if gv.numel() != d {
                return Err(DreamError::shape("rms_norm", x.shape(), gv.shape()));
            }
            let mut out = vec![0.0; x.numel()];
            let mut inv_rms = Vec::with_capacity(x.rows());
            for (r, xr) in x.data().chunks(d).enumerate() {
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps;
                let inv = if ms > 0.0 { 1.0 / ms.sqrt() } else { 0.0 };
                inv_rms.push(inv);
                for j in 0..d {
                    out[r * d + j] = xr[j] * inv * gv.data()[j];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), inv_rms)
        };
        let op = Op::RmsNorm {
            x: self.id,
            gain: gain.id,
            inv_rms,
        };
        Ok(self.tape.push(value, op, &[self.id, gain.id]))
    }

    /// `out.data[i] = self.data[index[i]]`, zero where the index is `None`.
    pub fn gather(self, index: Rc<Vec<Option<usize>>>, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if shape.iter().product::<usize>() != index.len() {
                return Err(DreamError::shape("gather", shape, &[index.len()]));
            }
            let src = a.data();
            let mut data = Vec::with_capacity(index.len());
            for ix in index.iter() {
                match ix {
                    Some(j) if *j < src.len() => data.push(src[*j]),
                    Some(j) => {
                        return Err(DreamError::Contract(format!(
                            "gather index {j} out of range for {} elements",
                            src.len()
                        )))
                    }
                    None => data.push(0.0),
                }
            }
            Tensor::new(shape.to_vec(), data)?
        };
        Ok(self.tape.push(value, Op::Gather { a: self.id, index }, &[self.id]))
    }

    /// Selects whole rows: `out[r] = self[rows[r]]`.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let c = self.cols();
        let index: Vec<Option<usize>> = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| Some(r * c + j)))
            .collect();
        self.gather(Rc::new(index), &[rows.len(), c])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, offset) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let c = a.cols();
            if len == 0 || start + len > a.rows() {
                return Err(DreamError::shape("slice_rows", a.shape(), &[start, len]));
            }
            let data = a.data()[start * c..(start + len) * c].to_vec();
            (Tensor::from_parts(vec![len, c], data), start * c)
        };
        Ok(self.tape.push(value, Op::SliceRows { a: self.id, offset }, &[self.id]))
    }

    /// Stacks matrices of equal width along rows.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| DreamError::Contract("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let c = nodes[first.id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                first.same_tape(*p)?;
                let t = &nodes[p.id].value;
                if t.cols() != c {
                    return Err(DreamError::shape("concat_rows", nodes[first.id].value.shape(), t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, c], data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(value, Op::ConcatRows { parts: ids.clone() }, &ids))
    }

    /// Mean of each `(start, len)` row segment; output has one row per segment.
    pub fn segment_mean(self, segments: Rc<Vec<(usize, usize)>>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let c = a.cols();
            let mut data = vec![0.0; segments.len() * c];
            for (s, &(start, len)) in segments.iter().enumerate() {
                if len == 0 || start + len > a.rows() {
                    return Err(DreamError::shape("segment_mean", a.shape(), &[start, len]));
                }
                let out = &mut data[s * c..(s + 1) * c];
                for r in start..start + len {
                    for (o, x) in out.iter_mut().zip(a.row(r)) {
                        *o += x;
                    }
                }
                for o in out.iter_mut() {
                    *o /= len as f64;
                }
            }
            Tensor::from_parts(vec![segments.len(), c], data)
        };
        Ok(self.tape.push(value, Op::SegmentMean { a: self.id, segments }, &[self.id]))
    }

    /// Unit-normalizes each row. Rows with norm below 1e-12 become zero and
    /// are counted in [`Tape::degenerate_rows`].
    pub fn l2_normalize_rows(self) -> Var<'t> {
        let (value, norms, degenerate) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let c = a.cols();
            let mut data = vec![0.0; a.numel()];
            let mut norms = Vec::with_capacity(a.rows());
            let mut degenerate = 0;
            for (xr, yr) in a.data().chunks(c).zip(data.chunks_mut(c)) {
                let n = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n < 1e-12 {
                    norms.push(0.0);
                    degenerate += 1;
                } else {
                    norms.push(n);
                    for (y, x) in yr.iter_mut().zip(xr) {
                        *y = x / n;
                    }
                }
            }
            (Tensor::from_parts(a.shape().to_vec(), data), norms, degenerate)
        };
        self.tape.note_degenerate(degenerate);
        self.tape.push(value, Op::L2NormalizeRows { a: self.id, norms }, &[self.id])
    }

    /// Summed token cross-entropy `Σ_r −log softmax(self[r])[target_r]` over
    /// rows whose target is `Some`.
    pub fn cross_entropy(self, targets: Rc<Vec<Option<usize>>>) -> Result<Var<'t>> {
        let (value, probs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let v = x.cols();
            if targets.len() != x.rows() {
                return Err(DreamError::shape("cross_entropy", x.shape(), &[targets.len()]));
            }
            if let Some(i) = x.first_non_finite() {
                return Err(DreamError::NonFinite {
                    what: "cross_entropy logits".into(),
                    index: i,
                });
            }
            let mut probs = vec![0.0; x.numel()];
            let mut loss = 0.0;
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                if t >= v {
                    return Err(DreamError::TokenOutOfRange { id: t, vocab: v });
                }
                let xr = x.row(r);
                let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = xr.iter().map(|&u| (u - m).exp()).sum();
                let lse = m + z.ln();
                loss += lse - xr[t];
                for j in 0..v {
                    probs[r * v + j] = (xr[j] - lse).exp();
                }
            }
            (Tensor::scalar(loss), probs)
        };
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets,
                probs,
            },
            &[self.id],
        ))
    }

    /// Rotary embedding over rows of `heads·head_dim` columns; row `r` is
    /// rotated by absolute position `positions[r]`, pair `(2k, 2k+1)` by
    /// angle `pos · base^(−2k/head_dim)`.
    pub fn rope(self, positions: &[usize], head_dim: usize, base: f64) -> Result<Var<'t>> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(DreamError::config("head_dim", format!("RoPE needs an even head dim, got {head_dim}")));
        }
        let (value, cos, sin) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let c = x.cols();
            if c % head_dim != 0 || positions.len() != x.rows() {
                return Err(DreamError::shape("rope", x.shape(), &[positions.len(), head_dim]));
            }
            let half = head_dim / 2;
            let mut cos = Vec::with_capacity(positions.len() * half);
            let mut sin = Vec::with_capacity(positions.len() * half);
            for &pos in positions {
                for p in 0..half {
                    let theta = base.powf(-2.0 * p as f64 / head_dim as f64);
                    let angle = pos as f64 * theta;
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
            let mut data = x.data().to_vec();
            for r in 0..x.rows() {
                for h in 0..c / head_dim {
                    for p in 0..half {
                        let (cs, sn) = (cos[r * half + p], sin[r * half + p]);
                        let base_ix = r * c + h * head_dim + 2 * p;
                        let (x0, x1) = (data[base_ix], data[base_ix + 1]);
                        data[base_ix] = x0 * cs - x1 * sn;
                        data[base_ix + 1] = x0 * sn + x1 * cs;
                    }
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), data), Rc::new(cos), Rc::new(sin))
        };
        let op = Op::Rope {
            a: self.id,
            cos,
            sin,
            head_dim,
        };
        Ok(self.tape.push(value, op, &[self.id]))
    }

    /// Blocked scaled dot-product attention; see [`AttnSpec`].
    pub fn attention(self, k: Var<'t>, v: Var<'t>, spec: AttnSpec, layout: Rc<AttnLayout>) -> Result<Var<'t>> {
        self.same_tape(k)?;
        self.same_tape(v)?;
        let (value, probs) = {
            let nodes = self.tape.nodes.borrow();
            attention::forward(&spec, &layout, &nodes[self.id].value, &nodes[k.id].value, &nodes[v.id].value)?
        };
        let op = Op::Attention {
            q: self.id,
            k: k.id,
            v: v.id,
            spec,
            layout,
            probs,
        };
        Ok(self.tape.push(value, op, &[self.id, k.id, v.id]))
    }
}

/// Stable softmax of `x` into `y` restricted to allowed entries.
pub(crate) fn softmax_into(x: &[f64], y: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut m = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > m {
            m = v;
        }
    }
    if m == f64::NEG_INFINITY {
        y.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for (j, (&v, o)) in x.iter().zip(y.iter_mut()).enumerate() {
        *o = if allowed(j) { (v - m).exp() } else { 0.0 };
        z += *o;
    }
    for o in y.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}
