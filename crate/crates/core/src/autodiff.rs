//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is an append-only list of nodes; node ids increase in creation
//! order, so the reverse of that order is a valid topological order for the
//! backward sweep. Only the operations the two model architectures need are
//! provided — no broadcasting beyond matrix + column-bias and scalars, no
//! higher-order derivatives.
//!
//! One composite op, [`Tape::mmd2_u_loss`], evaluates the unbiased MMD²
//! U-statistic against a fixed truth set with an analytic backward rule.
//! When the kernel bandwidth is adaptive the base bandwidth σ₀ depends on
//! the predictions, and that chain-rule term is included, so finite
//! differences agree with the tape gradient with no stop-gradient caveat.

use crate::mat::Mat;
use crate::mmd::{self, BandwidthMode, KernelKind, KernelSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {a0}x{a1} vs {b0}x{b1}")]
    ShapeMismatch { op: &'static str, a0: usize, a1: usize, b0: usize, b1: usize },
    #[error("backward requires a scalar loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
}

fn shape_err(op: &'static str, a: &Mat, b: &Mat) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, a0: a.rows(), a1: a.cols(), b0: b.rows(), b1: b.cols() }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// matrix scaled by a differentiable 1×1 node
    ScaleNode(usize, usize),
    /// differentiable 1×1 node added to every entry
    AddScalarNode(usize, usize),
    /// matrix (m×n) + column bias (m×1) broadcast over columns
    AddBias(usize, usize),
    Relu(usize),
    Transpose(usize),
    SoftmaxCols(usize),
    MeanRows(usize),
    FrobSq(usize),
    Trace(usize),
    /// u (m×1) ⊗ v (n×1) → m×n
    Outer(usize, usize),
    MmdU(usize, Box<MmdCtx>),
}

#[derive(Clone, Debug)]
struct MmdCtx {
    truth: Mat,
    spec: KernelSpec,
    sigma0: f64,
    adaptive: bool,
}

struct Node {
    op: Op,
    value: Mat,
    adjoint: Option<Mat>,
}

/// Reverse-mode tape; single-threaded during build and backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub type NodeId = usize;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value, adjoint: None });
        self.nodes.len() - 1
    }

    /// Differentiable parameter node.
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Non-differentiable input node.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    /// Gradient of the last backward() loss w.r.t. node `id` (zeros if unused).
    pub fn grad(&self, id: NodeId) -> Mat {
        let n = &self.nodes[id];
        n.adjoint
            .clone()
            .unwrap_or_else(|| Mat::zeros(n.value.rows(), n.value.cols()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let value = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if (va.rows(), va.cols()) != (vb.rows(), vb.cols()) {
            return Err(shape_err("add", va, vb));
        }
        let value = va.add(vb);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if (va.rows(), va.cols()) != (vb.rows(), vb.cols()) {
            return Err(shape_err("sub", va, vb));
        }
        let value = va.sub(vb);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.nodes[a].value.scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        for v in value.data_mut() {
            *v += s;
        }
        self.push(Op::AddScalar(a), value)
    }

    /// Scale a matrix by a differentiable 1×1 scalar node.
    pub fn scale_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let vs = &self.nodes[s].value;
        if (vs.rows(), vs.cols()) != (1, 1) {
            return Err(shape_err("scale_node", &self.nodes[a].value, vs));
        }
        let value = self.nodes[a].value.scale(vs.get(0, 0));
        Ok(self.push(Op::ScaleNode(a, s), value))
    }

    /// Add a differentiable 1×1 scalar node to every entry of a matrix.
    pub fn add_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let vs = &self.nodes[s].value;
        if (vs.rows(), vs.cols()) != (1, 1) {
            return Err(shape_err("add_scalar_node", &self.nodes[a].value, vs));
        }
        let sv = vs.get(0, 0);
        let mut value = self.nodes[a].value.clone();
        for v in value.data_mut() {
            *v += sv;
        }
        Ok(self.push(Op::AddScalarNode(a, s), value))
    }

    /// Broadcast a column bias (m×1) over every column of an m×n matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[bias].value);
        if vb.cols() != 1 || vb.rows() != va.rows() {
            return Err(shape_err("add_bias", va, vb));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            let b = vb.get(i, 0);
            for j in 0..value.cols() {
                let v = value.get(i, j) + b;
                value.set(i, j, v);
            }
        }
        Ok(self.push(Op::AddBias(a, bias), value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        for v in value.data_mut() {
            *v = v.max(0.0);
        }
        self.push(Op::Relu(a), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), value)
    }

    /// Column-wise softmax (max-shifted for stability).
    pub fn softmax_columns(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        let mut value = Mat::zeros(m, n);
        for j in 0..n {
            let mx = (0..m).map(|i| va.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..m {
                let e = (va.get(i, j) - mx).exp();
                value.set(i, j, e);
                z += e;
            }
            for i in 0..m {
                let v = value.get(i, j) / z;
                value.set(i, j, v);
            }
        }
        self.push(Op::SoftmaxCols(a), value)
    }

    /// Mean over rows: m×n → 1×n.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        let mut value = Mat::zeros(1, n);
        for j in 0..n {
            let s: f64 = (0..m).map(|i| va.get(i, j)).sum();
            value.set(0, j, s / m as f64);
        }
        self.push(Op::MeanRows(a), value)
    }

    /// Σ entries² → 1×1.
    pub fn frob_sq(&mut self, a: NodeId) -> NodeId {
        let value = Mat::from_vec(1, 1, vec![self.nodes[a].value.frob_sq()]);
        self.push(Op::FrobSq(a), value)
    }

    /// Trace of a square matrix → 1×1.
    pub fn trace(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = &self.nodes[a].value;
        if va.rows() != va.cols() {
            return Err(shape_err("trace", va, va));
        }
        let value = Mat::from_vec(1, 1, vec![va.trace()]);
        Ok(self.push(Op::Trace(a), value))
    }

    /// Outer product of column vectors: (m×1) ⊗ (n×1) → m×n.
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        let (vu, vv) = (&self.nodes[u].value, &self.nodes[v].value);
        if vu.cols() != 1 || vv.cols() != 1 {
            return Err(shape_err("outer", vu, vv));
        }
        let (m, n) = (vu.rows(), vv.rows());
        let mut value = Mat::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                value.set(i, j, vu.get(i, 0) * vv.get(j, 0));
            }
        }
        Ok(self.push(Op::Outer(u, v), value))
    }

    /// Unbiased MMD² between the prediction rows of node `pred` and a fixed
    /// `truth` set, as a differentiable scalar. With an adaptive-bandwidth
    /// kernel, σ₀ is computed here from (pred ∪ truth) and its dependence on
    /// the predictions is part of the backward rule.
    pub fn mmd2_u_loss(
        &mut self,
        pred: NodeId,
        truth: &Mat,
        spec: &KernelSpec,
    ) -> Result<NodeId, AutodiffError> {
        let vp = &self.nodes[pred].value;
        if vp.rows() != truth.rows() || vp.cols() != truth.cols() {
            return Err(shape_err("mmd2_u_loss", vp, truth));
        }
        let adaptive = matches!(spec.bandwidth, BandwidthMode::Adaptive);
        let sigma0 = mmd::resolve_bandwidth(spec, vp, truth);
        let v = mmd::mmd2_u(vp, truth, spec, sigma0).expect("sizes checked above");
        let ctx = MmdCtx { truth: truth.clone(), spec: spec.clone(), sigma0, adaptive };
        let value = Mat::from_vec(1, 1, vec![v]);
        Ok(self.push(Op::MmdU(pred, Box::new(ctx)), value))
    }

    fn accumulate(&mut self, id: NodeId, delta: &Mat) {
        let node = &mut self.nodes[id];
        match &mut node.adjoint {
            Some(a) => *a = a.add(delta),
            None => node.adjoint = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss node; adjoints of all ancestors are
    /// populated and readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        let lv = &self.nodes[loss].value;
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.rows(), lv.cols()));
        }
        for n in self.nodes.iter_mut() {
            n.adjoint = None;
        }
        self.nodes[loss].adjoint = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss).rev() {
            let Some(g) = self.nodes[id].adjoint.clone() else { continue };
            match self.nodes[id].op.clone() {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b].value.transpose());
                    let db = self.nodes[a].value.transpose().matmul(&g);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g.scale(-1.0));
                }
                Op::Scale(a, s) => self.accumulate(a, &g.scale(s)),
                Op::AddScalar(a) => self.accumulate(a, &g),
                Op::ScaleNode(a, s) => {
                    let sv = self.nodes[s].value.get(0, 0);
                    self.accumulate(a, &g.scale(sv));
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gi, ai)| gi * ai)
                        .sum();
                    self.accumulate(s, &Mat::from_vec(1, 1, vec![dot]));
                }
                Op::AddScalarNode(a, s) => {
                    self.accumulate(a, &g);
                    let sum: f64 = g.data().iter().sum();
                    self.accumulate(s, &Mat::from_vec(1, 1, vec![sum]));
                }
                Op::AddBias(a, bias) => {
                    self.accumulate(a, &g);
                    let mut db = Mat::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        let s: f64 = (0..g.cols()).map(|j| g.get(i, j)).sum();
                        db.set(i, 0, s);
                    }
                    self.accumulate(bias, &db);
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a].value;
                    let mut da = g.clone();
                    // subgradient at 0 is 0
                    for (d, v) in da.data_mut().iter_mut().zip(va.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Transpose(a) => self.accumulate(a, &g.transpose()),
                Op::SoftmaxCols(a) => {
                    let s = &self.nodes[id].value;
                    let (m, n) = (s.rows(), s.cols());
                    let mut da = Mat::zeros(m, n);
                    for j in 0..n {
                        let dot: f64 = (0..m).map(|i| g.get(i, j) * s.get(i, j)).sum();
                        for i in 0..m {
                            da.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::MeanRows(a) => {
                    let m = self.nodes[a].value.rows();
                    let n = self.nodes[a].value.cols();
                    let mut da = Mat::zeros(m, n);
                    for i in 0..m {
                        for j in 0..n {
                            da.set(i, j, g.get(0, j) / m as f64);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::FrobSq(a) => {
                    let da = self.nodes[a].value.scale(2.0 * g.get(0, 0));
                    self.accumulate(a, &da);
                }
                Op::Trace(a) => {
                    let d = self.nodes[a].value.rows();
                    let mut da = Mat::zeros(d, d);
                    for i in 0..d {
                        da.set(i, i, g.get(0, 0));
                    }
                    self.accumulate(a, &da);
                }
                Op::Outer(u, v) => {
                    let du = g.matmul(&self.nodes[v].value);
                    let dv = g.transpose().matmul(&self.nodes[u].value);
                    self.accumulate(u, &du);
                    self.accumulate(v, &dv);
                }
                Op::MmdU(pred, ctx) => {
                    let da = mmd_u_backward(&self.nodes[pred].value, &ctx).scale(g.get(0, 0));
                    self.accumulate(pred, &da);
                }
            }
        }
        Ok(())
    }
}

/// ∂k(u,v)/∂u at fixed σ₀.
fn kernel_grad_u(spec: &KernelSpec, sigma0: f64, u: &[f64], v: &[f64], out: &mut [f64]) {
    match spec.kind {
        KernelKind::Quadratic => {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, &vj) in out.iter_mut().zip(v) {
                *o = 2.0 * dot * vj;
            }
        }
        KernelKind::MultiScaleRbf => {
            let r2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            let mut coef = 0.0;
            for l in 1..=spec.levels {
                let sl = spec.level_bandwidth(sigma0, l);
                coef += spec.weights[l - 1] * (-r2 / sl).exp() * (-2.0 / sl);
            }
            for ((o, &uj), &vj) in out.iter_mut().zip(u).zip(v) {
                *o = coef * (uj - vj);
            }
        }
    }
}

/// ∂k(u,v)/∂σ₀ (RBF only; σ_l = σ₀·2^{l−⌈L/2⌉} so each level scales with σ₀).
fn kernel_grad_sigma0(spec: &KernelSpec, sigma0: f64, u: &[f64], v: &[f64]) -> f64 {
    match spec.kind {
        KernelKind::Quadratic => 0.0,
        KernelKind::MultiScaleRbf => {
            let r2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            (1..=spec.levels)
                .map(|l| {
                    let sl = spec.level_bandwidth(sigma0, l);
                    spec.weights[l - 1] * (-r2 / sl).exp() * r2 / (sl * sigma0)
                })
                .sum()
        }
    }
}

/// d(MMD²_u)/d(pred), including the adaptive-bandwidth chain-rule term.
fn mmd_u_backward(pred: &Mat, ctx: &MmdCtx) -> Mat {
    let (m, d) = (pred.rows(), pred.cols());
    let y = &ctx.truth;
    let spec = &ctx.spec;
    let s0 = ctx.sigma0;
    let norm = 1.0 / (m * (m - 1)) as f64;

    let mut grad = Mat::zeros(m, d);
    let mut buf = vec![0.0; d];
    for p in 0..m {
        let xp = pred.row(p);
        let mut acc = vec![0.0; d];
        for j in 0..m {
            if j == p {
                continue;
            }
            kernel_grad_u(spec, s0, xp, pred.row(j), &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
            kernel_grad_u(spec, s0, xp, y.row(j), &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a -= b;
            }
        }
        for (k, a) in acc.iter().enumerate() {
            grad.set(p, k, 2.0 * norm * a);
        }
    }

    if ctx.adaptive {
        // dL/dσ₀ over all U-statistic pairs
        let mut dl_ds0 = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                dl_ds0 += kernel_grad_sigma0(spec, s0, pred.row(i), pred.row(j))
                    + kernel_grad_sigma0(spec, s0, y.row(i), y.row(j))
                    - kernel_grad_sigma0(spec, s0, pred.row(i), y.row(j))
                    - kernel_grad_sigma0(spec, s0, pred.row(j), y.row(i));
            }
        }
        dl_ds0 *= norm;

        // dσ₀/dx_p = (4/(N(N−1)))·Σ_{pooled j≠p} (x_p − z_j)
        let n_total = 2 * m;
        let pooled_norm = 4.0 / (n_total * (n_total - 1)) as f64;
        let pooled_row = |i: usize| -> &[f64] {
            if i < m {
                pred.row(i)
            } else {
                y.row(i - m)
            }
        };
        for p in 0..m {
            let xp = pred.row(p);
            for k in 0..d {
                let mut s = 0.0;
                for j in 0..n_total {
                    if j == p {
                        continue;
                    }
                    s += xp[k] - pooled_row(j)[k];
                }
                let v = grad.get(p, k) + dl_ds0 * pooled_norm * s;
                grad.set(p, k, v);
            }
        }
    }
    grad
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` at `point`. The denominator floors at 1 so that
/// near-zero coordinates are compared absolutely.
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    analytic_grad: &[f64],
    point: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(analytic_grad.len(), point.len());
    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let g = analytic_grad[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1.0);
        worst = worst.max(rel);
    }
    worst
}
