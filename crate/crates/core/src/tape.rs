//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node inputs always precede
//! the node itself, so walking the tape backwards visits the graph in reverse
//! topological order. Gradients accumulate into each node's tensor across
//! repeated [`Tape::backward`] calls until the caller clears them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f32),
    Silu,
    Relu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScaleRows(Var, Vec<f32>),
    Silu(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Sum(Var),
    Loss {
        kind: LossKind,
        pred: Var,
        target: Var,
        weight: f32,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::ScaleRows(a, _)
            | Op::Silu(a)
            | Op::Relu(a)
            | Op::SliceCols(a, _)
            | Op::Sum(a) => vec![*a],
            Op::Loss { pred, target, .. } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    visit_log: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.visit_log.clear();
    }

    /// Records a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detach(), Op::Leaf)
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, p: &Tensor) -> Var {
        self.push(p.detach().with_requires_grad(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Indices of the nodes visited by the last `backward`, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_log
    }

    /// Every recorded node, oldest first.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.nodes.len()).map(Var)
    }

    /// Indices of the inputs recorded for `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Whether `v` lies on a differentiable path from a trainable leaf.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if !matches!(op, Op::Leaf) {
            let rg = op.inputs().iter().any(|v| self.requires_grad(*v));
            value.set_requires_grad(rg);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{op:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Scale(s) => Ok(self.scale(inputs[0], s)),
            Elementwise::Silu => Ok(self.silu(inputs[0])),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || self.data(bias).len() != sx[1] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let n = sx[1];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        };
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| f(da[if da.len() == 1 { 0 } else { i }], db[if db.len() == 1 { 0 } else { i }]))
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let mut value = self.value(a).detach();
        value.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(value, Op::Scale(a, s))
    }

    /// Multiplies row `i` of a 2-D tensor by `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: &[f32]) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.rows() != coeffs.len() {
            return Err(Error::dim("scale_rows", t.shape(), &[coeffs.len()]));
        }
        let cols = t.cols();
        let mut value = t.detach();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x *= coeffs[i / cols];
        }
        Ok(self.push(value, Op::ScaleRows(a, coeffs.to_vec())))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).detach();
        value.data_mut().iter_mut().for_each(|x| *x *= sigmoid(*x));
        self.push(value, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).detach();
        value.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(Error::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let value = Tensor::matrix(rows, ca + cb, data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Adds scalar vars left to right; a single term is returned as is.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::contract("sum of zero terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `weight * mean(|pred - target|^p)`, `p = 2` for MSE and `p = 1` for L1.
    pub fn reduce_loss(&mut self, kind: LossKind, pred: Var, target: Var, weight: f32) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::dim("reduce_loss", tp.shape(), tt.shape()));
        }
        if !(weight >= 0.0) {
            return Err(Error::contract(format!("loss weight must be >= 0, got {weight}")));
        }
        let n = tp.len() as f32;
        let total: f32 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| match kind {
                LossKind::Mse => (p - t) * (p - t),
                LossKind::L1 => (p - t).abs(),
            })
            .sum();
        let value = Tensor::scalar(weight * (total / n));
        Ok(self.push(
            value,
            Op::Loss {
                kind,
                pred,
                target,
                weight,
            },
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// adds the result to the nodes' gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.visit_log.clear();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.visit_log.push(i);
            for (input, ig) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].value.requires_grad() {
                    continue;
                }
                match &mut scratch[input.0] {
                    Some(buf) => buf.iter_mut().zip(&ig).for_each(|(b, x)| *b += x),
                    slot @ None => *slot = Some(ig),
                }
            }
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let wants = |v: Var| self.requires_grad(v);
        let mut grads = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut ga, 0.0);
                    grads.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut gb, 0.0);
                    grads.push((*b, gb));
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    grads.push((*x, g.to_vec()));
                }
                if wants(*bias) {
                    let n = self.data(*bias).len();
                    let mut gb = vec![0.0; n];
                    for (j, v) in g.iter().enumerate() {
                        gb[j % n] += v;
                    }
                    grads.push((*bias, gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    grads.push((*a, reduce_broadcast(g, self.data(*a).len(), 1.0)));
                }
                if wants(*b) {
                    grads.push((*b, reduce_broadcast(g, self.data(*b).len(), sign)));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let pick = |d: &[f32], j: usize| d[if d.len() == 1 { 0 } else { j }];
                if wants(*a) {
                    let full: Vec<f32> = g.iter().enumerate().map(|(j, v)| v * pick(db, j)).collect();
                    grads.push((*a, reduce_broadcast(&full, da.len(), 1.0)));
                }
                if wants(*b) {
                    let full: Vec<f32> = g.iter().enumerate().map(|(j, v)| v * pick(da, j)).collect();
                    grads.push((*b, reduce_broadcast(&full, db.len(), 1.0)));
                }
            }
            Op::Scale(a, s) => grads.push((*a, g.iter().map(|v| v * s).collect())),
            Op::ScaleRows(a, coeffs) => {
                let cols = out.cols();
                grads.push((*a, g.iter().enumerate().map(|(j, v)| v * coeffs[j / cols]).collect()));
            }
            Op::Silu(a) => {
                let x = self.data(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(v, &x)| {
                        let s = sigmoid(x);
                        v * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                grads.push((*a, ga));
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                grads.push((*a, g.iter().zip(x).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }).collect()));
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                if wants(*a) {
                    grads.push((*a, ga));
                }
                if wants(*b) {
                    grads.push((*b, gb));
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (cols, width) = (src.cols(), out.cols());
                let mut ga = vec![0.0; src.len()];
                for (r, row) in g.chunks(width).enumerate() {
                    ga[r * cols + start..r * cols + start + width].copy_from_slice(row);
                }
                grads.push((*a, ga));
            }
            Op::Sum(a) => grads.push((*a, vec![g[0]; self.data(*a).len()])),
            Op::Loss {
                kind,
                pred,
                target,
                weight,
            } => {
                let (dp, dt) = (self.data(*pred), self.data(*target));
                let scale = g[0] * weight / dp.len() as f32;
                let gp: Vec<f32> = dp
                    .iter()
                    .zip(dt)
                    .map(|(p, t)| match kind {
                        LossKind::Mse => scale * 2.0 * (p - t),
                        LossKind::L1 => scale * sign(p - t),
                    })
                    .collect();
                if wants(*target) {
                    grads.push((*target, gp.iter().map(|v| -v).collect()));
                }
                if wants(*pred) {
                    grads.push((*pred, gp));
                }
            }
        }
        for (v, gv) in &grads {
            if gv.len() != self.data(*v).len() {
                return Err(Error::contract(format!("gradient size mismatch at node {}", v.0)));
            }
        }
        Ok(grads)
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sums a full-size gradient down to a broadcast scalar when needed.
fn reduce_broadcast(g: &[f32], len: usize, sign: f32) -> Vec<f32> {
    if len == 1 && g.len() != 1 {
        vec![sign * g.iter().sum::<f32>()]
    } else {
        g.iter().map(|v| sign * v).collect()
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above cover every index the strides reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
