//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation eagerly (values are computed as nodes
//! are added) and [`Graph::backward`] replays the record in reverse to
//! accumulate adjoints. Only the operations an MLP with softmax or Gaussian
//! output needs are supported; broadcasting exists only for adding a bias
//! row to every row of a matrix.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Log(NodeId),
    Exp(NodeId),
    // probs caches the row softmax computed in the forward pass
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GaussianNll {
        pred: NodeId,
        target: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::GaussianNll { .. } => "gaussian_nll",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// Eagerly evaluated expression graph.
///
/// Nodes are appended in evaluation order, so the insertion order is a
/// topological order and the graph is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`, all row-major.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), out);
}

/// `out[m,n] = A B` where `A` and `B` are given as `(data, row stride, col stride)`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    out: &mut [f64],
) {
    assert!(out.len() >= m * n);
    assert!(a.0.len() >= m * k && b.0.len() >= k * n);
    // SAFETY: the asserts above keep every strided access in bounds for the
    // row-major layouts used by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        check_finite(op.name(), &value.data)?;
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::Scale(a, _) | Op::Relu(a) | Op::Sum(a) | Op::Mean(a) | Op::Log(a) | Op::Exp(a) => {
                self.nodes[a.0].requires_grad
            }
            Op::SoftmaxXent { logits, .. } => self.nodes[logits.0].requires_grad,
            Op::GaussianNll { pred, .. } => self.nodes[pred.0].requires_grad,
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t).expect("tensor values are finite")
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Param, t).expect("tensor values are finite")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, &tb.data, &mut out, m, k, n);
        self.push(
            Op::MatMul(a, b),
            Tensor {
                shape: vec![m, n],
                data: out,
            },
        )
    }

    /// Adds a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2("add_bias")?;
        if tb.shape != [n] {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.data.clone();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let shape = tx.shape.clone();
        self.push(Op::AddBias(x, bias), Tensor { shape, data: out })
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(op.name(), ta, tb));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape.clone();
        self.push(op, Tensor { shape, data })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| f(x)).collect();
        let shape = ta.shape.clone();
        self.push(op, Tensor { shape, data })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, k) = t.dims2("softmax_cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: target {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; rows * k];
        let mut total = 0.0;
        for (r, row) in t.data.chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        let loss = total / rows as f64;
        self.push(
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Mean over rows of `(pred - target)^2 / 2`: the Gaussian negative log
    /// density with unit observation scale, additive constant dropped.
    pub fn gaussian_nll(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let t = self.value(pred);
        if t.len() != target.len() || t.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_nll",
                lhs: t.shape.clone(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let loss = t
            .data
            .iter()
            .zip(target)
            .map(|(&p, &y)| 0.5 * (p - y) * (p - y))
            .sum::<f64>()
            / n;
        self.push(
            Op::GaussianNll {
                pred,
                target: target.to_vec(),
            },
            Tensor::scalar(loss),
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for parameter
    /// leaves only; parameters the root does not depend on get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if matches!(node.op, Op::Param) {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }

        let mut by_node = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if matches!(node.op, Op::Param) {
                let data = adj[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                check_finite("backward", &data)?;
                by_node.insert(
                    NodeId(idx),
                    Tensor {
                        shape: node.value.shape.clone(),
                        data,
                    },
                );
            }
        }
        // parameters created after the root cannot influence it
        for (idx, node) in self.nodes.iter().enumerate().skip(root.0 + 1) {
            if matches!(node.op, Op::Param) {
                by_node.insert(NodeId(idx), Tensor::zeros(node.value.shape.clone()));
            }
        }
        Ok(Gradients { by_node })
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.wants(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        (g, n as isize, 1),
                        (&tb.data, 1, n as isize),
                        &mut da,
                    );
                    self.accumulate(adj, *a, da);
                }
                if self.wants(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        (&ta.data, 1, k as isize),
                        (g, n as isize, 1),
                        &mut db,
                    );
                    self.accumulate(adj, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(adj, *bias, db);
                }
                self.accumulate(adj, *x, g.to_vec());
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = g.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    self.accumulate(adj, *a, da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(adj, *a, g.iter().map(|v| c * v).collect());
            }
            Op::Relu(a) => {
                // derivative at exactly zero is taken as zero
                let ta = self.value(*a);
                let da = g
                    .iter()
                    .zip(&ta.data)
                    .map(|(&v, &x)| if x > 0.0 { v } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(adj, *a, vec![g[0] / n as f64; n]);
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let da = g.iter().zip(&ta.data).map(|(v, x)| v / x).collect();
                self.accumulate(adj, *a, da);
            }
            Op::Exp(a) => {
                let da = g.iter().zip(&node.value.data).map(|(v, e)| v * e).collect();
                self.accumulate(adj, *a, da);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let k = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in targets.iter().enumerate() {
                    d[r * k + y] -= scale;
                }
                self.accumulate(adj, *logits, d);
            }
            Op::GaussianNll { pred, target } => {
                let tp = self.value(*pred);
                let scale = g[0] / target.len() as f64;
                let d = tp
                    .data
                    .iter()
                    .zip(target)
                    .map(|(p, y)| scale * (p - y))
                    .collect();
                self.accumulate(adj, *pred, d);
            }
        }
    }
}

/// Compares the analytic gradient of a scalar expression against central
/// finite differences.
///
/// `f` receives a fresh graph and the parameter leaf holding `point` and must
/// return the scalar root. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.param(p.clone());
        let root = f(&mut g, leaf)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let leaf = g.param(point.clone());
    let root = f(&mut g, leaf)?;
    let grads = g.backward(root)?;
    let analytic = grads.get(leaf).expect("leaf is a parameter");

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x = point.data[i];
        probe.data[i] = x + h;
        let up = eval(&probe)?;
        probe.data[i] = x - h;
        let down = eval(&probe)?;
        probe.data[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln3() {
        let mut g = Graph::new();
        let l = g.input(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
        assert!(approx(g.value(loss).item(), 3f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let mut g = Graph::new();
        let l = g.param(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(l).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_expression_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.3, -0.7]));
        let c = g.input(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.add_bias(a, v).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
        let big = g.input(Tensor::vector(vec![1e3]));
        assert!(matches!(g.exp(big), Err(Error::NonFinite { op: "exp" })));
        assert!(Tensor::vector(vec![1.0]).data().len() == 1);
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_elementwise_op_passes_grad_check() {
        let point = Tensor::vector(vec![0.3, 1.7, 0.9, 2.2]);
        let other = Tensor::vector(vec![0.5, -1.2, 2.0, 0.1]);
        let err = grad_check(
            |g, x| {
                let c = g.input(other.clone());
                let a = g.add(x, c)?;
                let s = g.sub(a, x)?;
                let m = g.mul(s, x)?;
                let e = g.exp(x)?;
                let l = g.log(x)?;
                let el = g.mul(e, l)?;
                let sc = g.scale(el, 0.25)?;
                let tot = g.add(m, sc)?;
                let r = g.relu(tot)?;
                let mean = g.mean(r)?;
                let sum = g.sum(x)?;
                g.add(mean, sum)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn dead_relu_unit_has_zero_gradient() {
        // preactivation x*w - 5 < -1 for all inputs, so the unit never fires
        let x = Tensor::matrix(3, 1, vec![0.5, 1.0, 1.5]).unwrap();
        let w = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let f = |g: &mut Graph, w: NodeId| {
            let xi = g.input(x.clone());
            let b = g.input(Tensor::vector(vec![-5.0]));
            let h = g.matmul(xi, w)?;
            let h = g.add_bias(h, b)?;
            let h = g.relu(h)?;
            g.sum(h)
        };
        let mut g = Graph::new();
        let leaf = g.param(w.clone());
        let root = f(&mut g, leaf).unwrap();
        assert_eq!(g.backward(root).unwrap().get(leaf).unwrap().data(), &[0.0]);
        assert!(grad_check(f, &w, 1e-5).unwrap() < 1e-12);
    }

    #[test]
    fn gaussian_nll_zero_residual() {
        let mut g = Graph::new();
        let p = g.param(Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap());
        let loss = g.gaussian_nll(p, &[1.5, -0.5]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
    }
}
