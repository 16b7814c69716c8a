//! Dense real arrays with eager reverse-mode gradient accumulation.
//!
//! The kernel covers exactly the operations the relation pipeline needs:
//! elementwise arithmetic, matrix-vector products, softmax variants, L1
//! distances, concatenation and a fused weighted binary cross-entropy.
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! then walks the record in reverse and accumulates adjoints into each node.
//!
//! Parameters live outside the graph in [`DiffTensor`]s. A graph borrows
//! their values for the duration of one forward/backward pass, so building
//! a graph never copies parameter storage.

use std::borrow::Cow;

use thiserror::Error;

/// Errors raised by kernel operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a {expected}-d tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// A dense row-major real array carrying its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl DiffTensor {
    pub fn new(shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![value.len()],
            });
        }
        Ok(Self {
            grad: vec![0.0; value.len()],
            shape,
            value,
            requires_grad,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            value: vec![0.0; numel],
            grad: vec![0.0; numel],
            requires_grad,
        }
    }

    pub fn vector(value: Vec<f64>, requires_grad: bool) -> Self {
        Self {
            shape: vec![value.len()],
            grad: vec![0.0; value.len()],
            value,
            requires_grad,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `delta` into the stored gradient.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise operation selector for [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Scale(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Max(Var, usize),
    Concat(Var, Var),
    L1(Var, Var),
    RowL1(Var, Var),
    WeightedBce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Eagerly evaluated computation record.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    /// Stands in for gradients that were never written.
    zeros: Vec<f64>,
}

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-7;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_values(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn log_softmax_values(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted binary cross-entropy on probabilities.
///
/// Each log argument is floored at [`PROB_FLOOR`], so a probability that
/// already equals its binary target contributes exactly zero.
pub fn weighted_bce(probs: &[f64], targets: &[f64], weights: &[f64]) -> f64 {
    probs
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((&p, &l), &w)| {
            let pos = if l != 0.0 {
                l * p.max(PROB_FLOOR).ln()
            } else {
                0.0
            };
            let neg = if l != 1.0 {
                (1.0 - l) * (1.0 - p).max(PROB_FLOOR).ln()
            } else {
                0.0
            };
            -w * (pos + neg)
        })
        .sum()
}

/// Inner product with four independent partial sums, so the loop vectorises.
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            zeros: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        if value.len() > self.zeros.len() {
            self.zeros.resize(value.len(), 0.0);
        }
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a parameter; the graph borrows its storage.
    pub fn param(&mut self, t: &'a DiffTensor) -> Var {
        self.push(
            t.shape.clone(),
            Cow::Borrowed(&t.value),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Registers a borrowed constant 1-d input.
    pub fn input(&mut self, value: &'a [f64]) -> Var {
        self.push(vec![value.len()], Cow::Borrowed(value), false, Op::Leaf)
    }

    /// Registers an owned leaf.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "leaf",
                left: shape,
                right: vec![value.len()],
            });
        }
        Ok(self.push(shape, Cow::Owned(value), requires_grad, Op::Leaf))
    }

    pub fn vector(&mut self, value: Vec<f64>, requires_grad: bool) -> Var {
        self.push(
            vec![value.len()],
            Cow::Owned(value),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn scalar(&mut self, value: f64, requires_grad: bool) -> Var {
        self.push(vec![], Cow::Owned(vec![value]), requires_grad, Op::Leaf)
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.to_vec());
        self.push(shape, Cow::Owned(value), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        let n = self.node(v);
        if n.grad.is_empty() {
            &self.zeros[..n.value.len()]
        } else {
            &n.grad
        }
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    fn vector_len(&self, op: &'static str, v: Var) -> Result<usize> {
        let shape = &self.node(v).shape;
        if shape.len() != 1 {
            return Err(NumericsError::Rank {
                op,
                expected: 1,
                shape: shape.clone(),
            });
        }
        Ok(shape[0])
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = &self.node(v).shape;
        if shape.len() != 2 {
            return Err(NumericsError::Rank {
                op,
                expected: 2,
                shape: shape.clone(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn is_scalar(&self, v: Var) -> bool {
        self.node(v).value.len() == 1 && self.node(v).shape.len() <= 1
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Scale(c), None) => Ok(self.scale(a, c)),
            (kind, _) => Err(NumericsError::Invalid {
                op: "elementwise",
                reason: format!("wrong operand count for {kind:?}"),
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            self.node(a).shape.clone(),
            Cow::Owned(value),
            rg,
            Op::Add(a, b),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            self.node(a).shape.clone(),
            Cow::Owned(value),
            rg,
            Op::Sub(a, b),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            self.node(a).shape.clone(),
            Cow::Owned(value),
            rg,
            Op::Mul(a, b),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(
            self.node(a).shape.clone(),
            Cow::Owned(value),
            rg,
            Op::Relu(a),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(
            self.node(a).shape.clone(),
            Cow::Owned(value),
            rg,
            Op::Scale(a, c),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(
            self.node(a).shape.clone(),
            Cow::Owned(value),
            rg,
            Op::AddScalar(a),
        )
    }

    /// Multiplies every entry of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.is_scalar(s) {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_by",
                left: self.node(a).shape.clone(),
                right: self.node(s).shape.clone(),
            });
        }
        let c = self.item(s);
        let value: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(
            self.node(a).shape.clone(),
            Cow::Owned(value),
            rg,
            Op::ScaleBy(a, s),
        ))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("matvec", w)?;
        let len = self.vector_len("matvec", x)?;
        if len != n {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec",
                left: vec![m, n],
                right: vec![len],
            });
        }
        let (wv, xv) = (self.value(w), self.value(x));
        let value: Vec<f64> = wv
            .chunks_exact(n.max(1))
            .take(m)
            .map(|row| dot_lanes(row, xv))
            .collect();
        let value = if n == 0 { vec![0.0; m] } else { value };
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(vec![m], Cow::Owned(value), rg, Op::MatVec(w, x)))
    }

    /// `W^T · p` for `W` of shape m×n and `p` of length m.
    pub fn mat_t_vec(&mut self, w: Var, p: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mat_t_vec", w)?;
        let len = self.vector_len("mat_t_vec", p)?;
        if len != m {
            return Err(NumericsError::ShapeMismatch {
                op: "mat_t_vec",
                left: vec![m, n],
                right: vec![len],
            });
        }
        let mut value = vec![0.0; n];
        let (wv, pv) = (self.value(w), self.value(p));
        for (row, &pr) in wv.chunks_exact(n.max(1)).zip(pv) {
            for (out, &wk) in value.iter_mut().zip(row) {
                *out += pr * wk;
            }
        }
        let rg = self.rg(w) || self.rg(p);
        Ok(self.push(vec![n], Cow::Owned(value), rg, Op::MatTVec(w, p)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = dot_lanes(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![], Cow::Owned(vec![v]), rg, Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v: f64 = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], Cow::Owned(vec![v]), rg, Op::Sum(a))
    }

    /// Sums single-element nodes; an empty list yields a constant zero.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.scalar(0.0, false));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let n = self.vector_len("softmax", z)?;
        if n == 0 {
            return Err(NumericsError::Invalid {
                op: "softmax",
                reason: "empty input".into(),
            });
        }
        if self.value(z).iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "softmax" });
        }
        let value = softmax_values(self.value(z));
        let rg = self.rg(z);
        Ok(self.push(vec![n], Cow::Owned(value), rg, Op::Softmax(z)))
    }

    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let n = self.vector_len("log_softmax", z)?;
        if n == 0 {
            return Err(NumericsError::Invalid {
                op: "log_softmax",
                reason: "empty input".into(),
            });
        }
        if self.value(z).iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "log_softmax" });
        }
        let value = log_softmax_values(self.value(z));
        let rg = self.rg(z);
        Ok(self.push(vec![n], Cow::Owned(value), rg, Op::LogSoftmax(z)))
    }

    /// Selects one entry of a vector as a scalar node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.vector_len("pick", a)?;
        if index >= n {
            return Err(NumericsError::Index {
                op: "pick",
                index,
                len: n,
            });
        }
        let v = self.value(a)[index];
        let rg = self.rg(a);
        Ok(self.push(vec![], Cow::Owned(vec![v]), rg, Op::Pick(a, index)))
    }

    /// Largest entry; the adjoint flows to the first maximiser.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let n = self.vector_len("max", a)?;
        if n == 0 {
            return Err(NumericsError::Invalid {
                op: "max",
                reason: "empty input".into(),
            });
        }
        let (idx, v) = self.value(a).iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, x)| if x > best.1 { (i, x) } else { best },
        );
        let rg = self.rg(a);
        Ok(self.push(vec![], Cow::Owned(vec![v]), rg, Op::Max(a, idx)))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        let picked = self.pick(ls, target)?;
        Ok(self.scale(picked, -1.0))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.vector_len("concat", a)?;
        let m = self.vector_len("concat", b)?;
        let mut value = Vec::with_capacity(n + m);
        value.extend_from_slice(self.value(a));
        value.extend_from_slice(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n + m], Cow::Owned(value), rg, Op::Concat(a, b)))
    }

    /// Mean absolute difference; the subgradient at ties is 0.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let n = self.value(a).len();
        let total: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y).abs())
            .sum();
        let v = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![], Cow::Owned(vec![v]), rg, Op::L1(a, b)))
    }

    /// Mean absolute difference between `f` and every row of `rows`.
    pub fn row_l1_distances(&mut self, rows: Var, f: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("row_l1_distances", rows)?;
        let len = self.vector_len("row_l1_distances", f)?;
        if len != n || n == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "row_l1_distances",
                left: vec![m, n],
                right: vec![len],
            });
        }
        let fv = self.value(f);
        let value: Vec<f64> = self
            .value(rows)
            .chunks_exact(n)
            .map(|row| row.iter().zip(fv).map(|(d, x)| (x - d).abs()).sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(rows) || self.rg(f);
        Ok(self.push(vec![m], Cow::Owned(value), rg, Op::RowL1(rows, f)))
    }

    /// `Σ_c w_c · BCE(sigmoid(z_c), l_c)` with binary targets.
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<Var> {
        let n = self.vector_len("weighted_bce", logits)?;
        if targets.len() != n || weights.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_bce",
                left: vec![n],
                right: vec![targets.len(), weights.len()],
            });
        }
        if targets.iter().any(|&l| l != 0.0 && l != 1.0) {
            return Err(NumericsError::Invalid {
                op: "weighted_bce",
                reason: "targets must be 0 or 1".into(),
            });
        }
        let probs: Vec<f64> = self.value(logits).iter().map(|&z| sigmoid(z)).collect();
        let v = weighted_bce(&probs, targets, weights);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            Cow::Owned(vec![v]),
            rg,
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    ///
    /// Each call adds a fresh set of adjoints, so calling it k times leaves
    /// k times the gradient in place.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(NumericsError::Rank {
                op: "backward",
                expected: 0,
                shape: self.node(loss).shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            let grad = &mut self.nodes[idx].grad;
            if grad.is_empty() {
                *grad = g;
            } else {
                for (dst, src) in grad.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |target: Var, len: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            let slot = adj[target.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    send(v, g.len(), &mut |s| {
                        s.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                    });
                }
            }
            Op::Sub(a, b) => {
                send(*a, g.len(), &mut |s| {
                    s.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                });
                send(*b, g.len(), &mut |s| {
                    s.iter_mut().zip(g).for_each(|(d, x)| *d -= x)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.len(), &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                send(*b, g.len(), &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                send(*a, g.len(), &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(av) {
                        if *y > 0.0 {
                            *d += x;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                send(*a, g.len(), &mut |s| {
                    s.iter_mut().zip(g).for_each(|(d, x)| *d += x * c)
                });
            }
            Op::AddScalar(a) => {
                send(*a, g.len(), &mut |s| {
                    s.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                });
            }
            Op::ScaleBy(a, sc) => {
                let c = self.item(*sc);
                let av = self.value(*a);
                send(*a, g.len(), &mut |s| {
                    s.iter_mut().zip(g).for_each(|(d, x)| *d += x * c)
                });
                let total: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                send(*sc, 1, &mut |s| s[0] += total);
            }
            Op::MatVec(w, x) => {
                let (m, n) = (self.node(*w).shape[0], self.node(*w).shape[1]);
                let (wv, xv) = (self.value(*w), self.value(*x));
                send(*w, m * n, &mut |s| {
                    for (row, gi) in s.chunks_exact_mut(n.max(1)).zip(g) {
                        if *gi != 0.0 {
                            for (d, xk) in row.iter_mut().zip(xv) {
                                *d += gi * xk;
                            }
                        }
                    }
                });
                send(*x, n, &mut |s| {
                    for (row, gi) in wv.chunks_exact(n.max(1)).zip(g) {
                        for (d, wk) in s.iter_mut().zip(row) {
                            *d += gi * wk;
                        }
                    }
                });
            }
            Op::MatTVec(w, p) => {
                let (m, n) = (self.node(*w).shape[0], self.node(*w).shape[1]);
                let (wv, pv) = (self.value(*w), self.value(*p));
                send(*w, m * n, &mut |s| {
                    for (row, pr) in s.chunks_exact_mut(n.max(1)).zip(pv) {
                        for (d, gk) in row.iter_mut().zip(g) {
                            *d += pr * gk;
                        }
                    }
                });
                send(*p, m, &mut |s| {
                    for (d, row) in s.iter_mut().zip(wv.chunks_exact(n.max(1))) {
                        *d += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let g0 = g[0];
                send(*a, av.len(), &mut |s| {
                    s.iter_mut().zip(bv).for_each(|(d, y)| *d += g0 * y)
                });
                send(*b, bv.len(), &mut |s| {
                    s.iter_mut().zip(av).for_each(|(d, y)| *d += g0 * y)
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(*a, n, &mut |s| s.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Softmax(z) => {
                let y = &node.value;
                let inner: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                send(*z, y.len(), &mut |s| {
                    for ((d, gi), yi) in s.iter_mut().zip(g).zip(y.iter()) {
                        *d += yi * (gi - inner);
                    }
                });
            }
            Op::LogSoftmax(z) => {
                let y = &node.value;
                let total: f64 = g.iter().sum();
                send(*z, y.len(), &mut |s| {
                    for ((d, gi), yi) in s.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi - yi.exp() * total;
                    }
                });
            }
            Op::Pick(a, i) | Op::Max(a, i) => {
                let n = self.value(*a).len();
                send(*a, n, &mut |s| s[*i] += g[0]);
            }
            Op::Concat(a, b) => {
                let n = self.value(*a).len();
                let m = self.value(*b).len();
                send(*a, n, &mut |s| {
                    s.iter_mut().zip(&g[..n]).for_each(|(d, x)| *d += x)
                });
                send(*b, m, &mut |s| {
                    s.iter_mut().zip(&g[n..]).for_each(|(d, x)| *d += x)
                });
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len();
                if n > 0 {
                    let c = g[0] / n as f64;
                    send(*a, n, &mut |s| {
                        for ((d, x), y) in s.iter_mut().zip(av).zip(bv) {
                            *d += c * sign(x - y);
                        }
                    });
                    send(*b, n, &mut |s| {
                        for ((d, x), y) in s.iter_mut().zip(av).zip(bv) {
                            *d -= c * sign(x - y);
                        }
                    });
                }
            }
            Op::RowL1(rows, f) => {
                let (m, n) = (self.node(*rows).shape[0], self.node(*rows).shape[1]);
                let (dv, fv) = (self.value(*rows), self.value(*f));
                let inv = 1.0 / n as f64;
                send(*rows, m * n, &mut |s| {
                    for ((srow, drow), gr) in s.chunks_exact_mut(n).zip(dv.chunks_exact(n)).zip(g) {
                        let c = gr * inv;
                        for ((d, dk), fk) in srow.iter_mut().zip(drow).zip(fv) {
                            *d -= c * sign(fk - dk);
                        }
                    }
                });
                send(*f, n, &mut |s| {
                    for (drow, gr) in dv.chunks_exact(n).zip(g) {
                        let c = gr * inv;
                        for ((d, dk), fk) in s.iter_mut().zip(drow).zip(fv) {
                            *d += c * sign(fk - dk);
                        }
                    }
                });
            }
            Op::WeightedBce {
                logits,
                targets,
                weights,
            } => {
                let zv = self.value(*logits);
                let g0 = g[0];
                send(*logits, zv.len(), &mut |s| {
                    for (((d, &z), &l), &w) in s.iter_mut().zip(zv).zip(targets).zip(weights) {
                        let p = sigmoid(z);
                        let clamped = if l == 1.0 {
                            p < PROB_FLOOR
                        } else {
                            1.0 - p < PROB_FLOOR
                        };
                        if !clamped {
                            *d += g0 * w * (p - l);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference oracle used by unit tests across the crate.

    /// Relative error with an absolute floor so near-zero gradients compare sanely.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1.0))
    }

    /// Central differences of a scalar function of a flat parameter vector.
    pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + step;
                let hi = f(&probe);
                probe[i] = orig - step;
                let lo = f(&probe);
                probe[i] = orig;
                (hi - lo) / (2.0 * step)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{numeric_grad, rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vals(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).to_vec()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.vector(vec![-1.0, 0.0, 2.0], false);
        let r = g.elementwise(Elementwise::Relu, a, None).unwrap();
        assert_eq!(vals(&g, r), vec![0.0, 0.0, 2.0]);

        let x = g.vector(vec![1.0, 2.0], false);
        let y = g.vector(vec![3.0, 4.0], false);
        let m = g.elementwise(Elementwise::Mul, x, Some(y)).unwrap();
        assert_eq!(vals(&g, m), vec![3.0, 8.0]);

        let z = g.vector(vec![0.0, 0.0], false);
        let s = g.elementwise(Elementwise::Add, x, Some(z)).unwrap();
        assert_eq!(vals(&g, s), vec![1.0, 2.0]);

        let bad = g.vector(vec![1.0; 3], false);
        assert!(matches!(
            g.add(x, bad),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_adjoint_is_zero_at_kink() {
        let mut g = Graph::new();
        let x = g.vector(vec![-1.0, 0.0, 1.0], true);
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matvec_examples() {
        let mut g = Graph::new();
        let id = g.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let zero = g.leaf(vec![2, 2], vec![0.0; 4], false).unwrap();
        let w = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let x = g.vector(vec![3.0, 4.0], false);
        let ones = g.vector(vec![1.0, 1.0], false);
        let a = g.matvec(id, x).unwrap();
        assert_eq!(vals(&g, a), vec![3.0, 4.0]);
        let b = g.matvec(zero, x).unwrap();
        assert_eq!(vals(&g, b), vec![0.0, 0.0]);
        let c = g.matvec(w, ones).unwrap();
        assert_eq!(vals(&g, c), vec![3.0, 7.0]);
        let short = g.vector(vec![1.0; 3], false);
        assert!(g.matvec(w, short).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.vector(vec![0.0; 3], false);
        let p = g.softmax(z).unwrap();
        for v in g.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = g.vector(vec![0.0, 3f64.ln()], false);
        let p = g.softmax(z).unwrap();
        assert!((g.value(p)[0] - 0.25).abs() < 1e-15);
        assert!((g.value(p)[1] - 0.75).abs() < 1e-15);

        let base = softmax_values(&[0.3, 1.3, 2.3]);
        for c in [-50.0, 0.0, 7.5, 400.0] {
            let shifted = softmax_values(&[c + 0.3, c + 1.3, c + 2.3]);
            for (a, b) in base.iter().zip(&shifted) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let bad = g.vector(vec![f64::NAN, 0.0], false);
        assert_eq!(
            g.softmax(bad),
            Err(NumericsError::NonFinite { op: "softmax" })
        );
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::new();
        let a = g.vector(vec![3.0, 4.0], false);
        let b = g.vector(vec![0.0, 0.0], false);
        let d = g.l1_distance(a, b).unwrap();
        assert_eq!(g.item(d), 3.5);
        let e = g.l1_distance(a, a).unwrap();
        assert_eq!(g.item(e), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (xv, yv) = (g.vector(x, false), g.vector(y, false));
            let d1 = g.l1_distance(xv, yv).unwrap();
            let d2 = g.l1_distance(yv, xv).unwrap();
            assert_eq!(g.item(d1), g.item(d2));
        }
        let c = g.vector(vec![1.0], false);
        assert!(g.l1_distance(a, c).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.vector(vec![1.0], true);
        let b = g.vector(vec![2.0, 3.0], true);
        let c = g.concat(a, b).unwrap();
        assert_eq!(vals(&g, c), vec![1.0, 2.0, 3.0]);
        let e = g.vector(vec![], false);
        let f = g.vector(vec![5.0], false);
        let ef = g.concat(e, f).unwrap();
        assert_eq!(vals(&g, ef), vec![5.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a), &[1.0]);
        assert_eq!(g.grad(b), &[1.0, 1.0]);
        let m = g.leaf(vec![1, 1], vec![1.0], false).unwrap();
        assert!(matches!(g.concat(m, f), Err(NumericsError::Rank { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.scalar(2.5, true);
        g.backward(x).unwrap();
        assert_eq!(g.grad(x), &[1.0]);

        let mut g = Graph::new();
        let x = g.vector(vec![-1.0, -2.0, -0.5], true);
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[0.0; 3]);

        let v = g.vector(vec![1.0, 2.0], true);
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.vector(vec![1.0, -2.0], true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[4.0, -8.0]);
        g.zero_grad();
        assert_eq!(g.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn multi_use_matches_single_use_rewrite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..6 {
            let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let x = g.vector(x0.clone(), true);
            let mut terms = Vec::new();
            for _ in 0..k {
                let t = g.mul(x, x).unwrap();
                terms.push(g.sum(t));
            }
            let loss = g.sum_scalars(&terms).unwrap();
            g.backward(loss).unwrap();

            let mut h = Graph::new();
            let y = h.vector(x0.clone(), true);
            let t = h.mul(y, y).unwrap();
            let t = h.scale(t, k as f64);
            let loss = h.sum(t);
            h.backward(loss).unwrap();
            for (a, b) in g.grad(x).iter().zip(h.grad(y)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_grad_starts_zero() {
        let mut t = DiffTensor::new(vec![2, 3], vec![1.0; 6], true).unwrap();
        assert_eq!(t.grad(), &[0.0; 6]);
        t.accumulate_grad(&[1.0; 6]);
        t.zero_grad();
        assert_eq!(t.grad(), &[0.0; 6]);
        assert!(DiffTensor::new(vec![2, 2], vec![0.0; 3], false).is_err());
    }

    #[test]
    fn weighted_bce_values() {
        assert_eq!(weighted_bce(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]), 0.0);
        let v = weighted_bce(&[0.5, 0.5], &[1.0, 0.0], &[1.0, 1.0]);
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-15);
        let w = weighted_bce(&[0.3, 0.8], &[1.0, 0.0], &[2.0, 2.0]);
        let u = weighted_bce(&[0.3, 0.8], &[1.0, 0.0], &[1.0, 1.0]);
        assert!((w - 2.0 * u).abs() < 1e-15);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let w0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let build = |g: &mut Graph<'_>, w: Vec<f64>, x: &[f64]| {
                let wv = g.leaf(vec![3, 4], w, true).unwrap();
                let xv = g.vector(x.to_vec(), false);
                let h = g.matvec(wv, xv).unwrap();
                let h = g.relu(h);
                let p = g.softmax(h).unwrap();
                let m = g.max(p).unwrap();
                let q = g.scale_by(h, m).unwrap();
                let loss = g.cross_entropy(q, 1).unwrap();
                (wv, loss)
            };
            let mut g = Graph::new();
            let (wv, loss) = build(&mut g, w0.clone(), &x0);
            g.backward(loss).unwrap();
            let analytic = g.grad(wv).to_vec();
            let mut f = |w: &[f64]| {
                let mut g = Graph::new();
                let (_, loss) = build(&mut g, w.to_vec(), &x0);
                g.item(loss)
            };
            let numeric = numeric_grad(&mut f, &w0, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }
}
