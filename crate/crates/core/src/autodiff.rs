//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records operations eagerly (Wengert list): every builder call
//! evaluates its primal value immediately and caches it on the node, so a
//! single reverse sweep in [`Tape::backward`] yields exact gradients of a
//! scalar objective with respect to any recorded leaves.
//!
//! The op set is deliberately small: affine layers, relu, sigmoid, sums,
//! constant scaling, subtraction, negation, coordinate selection, and a
//! numerically stable log-sum-exp. That is enough to express classifier
//! logits, cross-entropy, and every sigmoid-relaxed set-size objective this
//! crate optimizes, with gradients flowing to inputs and parameters alike.

use std::collections::HashMap;
use thiserror::Error;

/// Dense row-major tensor. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: f64) -> Result<Self, AutodiffError> {
        Self::new(vec![], vec![v])
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![data.len()], data)
    }

    /// Rank-2 tensor from rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(AutodiffError::RaggedMatrix);
        }
        Self::new(vec![r, c], rows.iter().flatten().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable entry access for in-place parameter updates. Callers are
    /// responsible for keeping entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, AutodiffError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(AutodiffError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("tensor contains a non-finite entry")]
    NonFinite,
    #[error("matrix rows have unequal lengths")]
    RaggedMatrix,
    #[error("tensor of shape {shape:?} is not a scalar")]
    NotScalar { shape: Vec<usize> },
    #[error("{op} at node {node}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} at node {node}: expected {expected}, got shape {got:?}")]
    BadOperand {
        op: &'static str,
        node: usize,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("index {index} out of range for vector of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("node id {0} is not on this tape")]
    UnknownNode(usize),
    #[error("backward objective must be scalar, found shape {shape:?}")]
    ObjectiveNotScalar { shape: Vec<usize> },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Gradient-carrying input.
    Leaf,
    /// Input excluded from gradient reporting.
    Constant,
    /// w[out,in] * x[in] + b[out]
    Affine {
        w: usize,
        b: usize,
        x: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    /// Scalar sum of all entries.
    Sum(usize),
    /// Multiply every entry by a fixed constant.
    Scale(usize, f64),
    Sub(usize, usize),
    /// Elementwise v[i] - s for scalar node s.
    SubScalar {
        v: usize,
        s: usize,
    },
    Neg(usize),
    Add(usize, usize),
    /// Scalar selection v[i].
    Index {
        v: usize,
        i: usize,
    },
    /// Scalar log(sum(exp(v))), max-shifted.
    LogSumExp(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar objective with respect to requested leaves.
#[derive(Debug, Clone)]
pub struct GradientResult {
    value: f64,
    grads: Vec<(NodeId, Tensor)>,
}

impl GradientResult {
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Gradient tensor for a requested leaf.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    pub fn grads(&self) -> &[(NodeId, Tensor)] {
        &self.grads
    }
}

/// Wengert list: ordered operation records with cached primal values.
///
/// Single-threaded during one forward/backward pass; distinct tapes over
/// shared read-only data may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Cached primal value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn value_scalar(&self, id: NodeId) -> Result<f64, AutodiffError> {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    /// Record a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId, AutodiffError> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    /// y = W x + b with W of shape `[out, in]`, x and b rank-1.
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(w)?;
        self.check(b)?;
        self.check(x)?;
        let here = self.nodes.len();
        let (wt, bt, xt) = (self.value(w), self.value(b), self.value(x));
        let [rows, cols] = *wt.shape() else {
            return Err(AutodiffError::BadOperand {
                op: "affine",
                node: here,
                expected: "rank-2 weight",
                got: wt.shape().to_vec(),
            });
        };
        if xt.shape() != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                node: here,
                lhs: wt.shape().to_vec(),
                rhs: xt.shape().to_vec(),
            });
        }
        if bt.shape() != [rows] {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                node: here,
                lhs: wt.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let mut acc = bt.data()[r];
            let row = &wt.data()[r * cols..(r + 1) * cols];
            for (wv, xv) in row.iter().zip(xt.data()) {
                acc += wv * xv;
            }
            *slot = acc;
        }
        let value = Tensor::new(vec![rows], out)?;
        Ok(self.push(
            Op::Affine {
                w: w.0,
                b: b.0,
                x: x.0,
            },
            value,
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        Ok(self.push(Op::Relu(a.0), value))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&v| sigmoid(v)).collect(),
        )?;
        Ok(self.push(Op::Sigmoid(a.0), value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = Tensor::scalar(self.value(a).data().iter().sum())?;
        Ok(self.push(Op::Sum(a.0), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|v| v * c).collect(),
        )?;
        Ok(self.push(Op::Scale(a.0, c), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let here = self.nodes.len();
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sub",
                node: here,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        Ok(self.push(Op::Sub(a.0, b.0), value))
    }

    /// Elementwise `v - s`, broadcasting the scalar node `s`.
    pub fn sub_scalar(&mut self, v: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(v)?;
        self.check(s)?;
        let here = self.nodes.len();
        if !self.value(s).is_scalar() {
            return Err(AutodiffError::BadOperand {
                op: "sub_scalar",
                node: here,
                expected: "scalar subtrahend",
                got: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let value = Tensor::new(
            self.value(v).shape().to_vec(),
            self.value(v).data().iter().map(|x| x - sv).collect(),
        )?;
        Ok(self.push(Op::SubScalar { v: v.0, s: s.0 }, value))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|v| -v).collect(),
        )?;
        Ok(self.push(Op::Neg(a.0), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let here = self.nodes.len();
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                node: here,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(Op::Add(a.0, b.0), value))
    }

    /// Scalar selection `v[i]`.
    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId, AutodiffError> {
        self.check(v)?;
        let vt = self.value(v);
        if i >= vt.len() {
            return Err(AutodiffError::IndexOutOfRange {
                index: i,
                len: vt.len(),
            });
        }
        let value = Tensor::scalar(vt.data()[i])?;
        Ok(self.push(Op::Index { v: v.0, i }, value))
    }

    /// Scalar `log(sum(exp(v)))` computed with a max shift.
    pub fn log_sum_exp(&mut self, v: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(v)?;
        let here = self.nodes.len();
        let vt = self.value(v);
        if vt.is_empty() {
            return Err(AutodiffError::BadOperand {
                op: "log_sum_exp",
                node: here,
                expected: "non-empty vector",
                got: vt.shape().to_vec(),
            });
        }
        let m = vt.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vt.data().iter().map(|&x| (x - m).exp()).sum();
        let value = Tensor::scalar(m + s.ln())?;
        Ok(self.push(Op::LogSumExp(v.0), value))
    }

    /// Reverse sweep from a scalar `objective`, reporting gradients for `wrt`.
    ///
    /// Each node is visited exactly once, in reverse construction order.
    /// Relu takes subgradient 0 at the kink.
    pub fn backward(
        &self,
        objective: NodeId,
        wrt: &[NodeId],
    ) -> Result<GradientResult, AutodiffError> {
        self.check(objective)?;
        for id in wrt {
            self.check(*id)?;
        }
        let obj = &self.nodes[objective.0];
        if !obj.value.is_scalar() {
            return Err(AutodiffError::ObjectiveNotScalar {
                shape: obj.value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[objective.0][0] = 1.0;

        for idx in (0..=objective.0).rev() {
            let g_out = std::mem::take(&mut grads[idx]);
            if g_out.iter().all(|&g| g == 0.0) {
                grads[idx] = g_out;
                continue;
            }
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Affine { w, b, x } => {
                    let cols = self.nodes[w].value.shape()[1];
                    let wt = self.nodes[w].value.data().to_vec();
                    let xt = self.nodes[x].value.data().to_vec();
                    for (r, &g) in g_out.iter().enumerate() {
                        grads[b][r] += g;
                        for c in 0..cols {
                            grads[w][r * cols + c] += g * xt[c];
                            grads[x][c] += g * wt[r * cols + c];
                        }
                    }
                }
                Op::Relu(a) => {
                    for (i, &g) in g_out.iter().enumerate() {
                        if self.nodes[a].value.data()[i] > 0.0 {
                            grads[a][i] += g;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for (i, &g) in g_out.iter().enumerate() {
                        let y = node.value.data()[i];
                        grads[a][i] += g * y * (1.0 - y);
                    }
                }
                Op::Sum(a) => {
                    let g = g_out[0];
                    for slot in grads[a].iter_mut() {
                        *slot += g;
                    }
                }
                Op::Scale(a, c) => {
                    for (i, &g) in g_out.iter().enumerate() {
                        grads[a][i] += g * c;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &g) in g_out.iter().enumerate() {
                        grads[a][i] += g;
                        grads[b][i] -= g;
                    }
                }
                Op::SubScalar { v, s } => {
                    let mut total = 0.0;
                    for (i, &g) in g_out.iter().enumerate() {
                        grads[v][i] += g;
                        total += g;
                    }
                    grads[s][0] -= total;
                }
                Op::Neg(a) => {
                    for (i, &g) in g_out.iter().enumerate() {
                        grads[a][i] -= g;
                    }
                }
                Op::Add(a, b) => {
                    for (i, &g) in g_out.iter().enumerate() {
                        grads[a][i] += g;
                        grads[b][i] += g;
                    }
                }
                Op::Index { v, i } => {
                    grads[v][i] += g_out[0];
                }
                Op::LogSumExp(v) => {
                    let g = g_out[0];
                    let lse = node.value.data()[0];
                    for (i, slot) in grads[v].iter_mut().enumerate() {
                        *slot += g * (self.nodes[v].value.data()[i] - lse).exp();
                    }
                }
            }
            grads[idx] = g_out;
        }

        let mut seen = HashMap::new();
        let mut out = Vec::with_capacity(wrt.len());
        for &id in wrt {
            if seen.insert(id, ()).is_some() {
                continue;
            }
            let shape = self.nodes[id.0].value.shape().to_vec();
            out.push((id, Tensor::new(shape, grads[id.0].clone())?));
        }
        Ok(GradientResult {
            value: obj.value.data()[0],
            grads: out,
        })
    }
}

/// Logistic function 1/(1+e^-z), computed on the stable branch so large
/// negative arguments never overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Central finite differences: (f(p + h e_i) - f(p - h e_i)) / 2h per
/// coordinate. Test oracle; independent of the tape.
pub fn finite_difference_gradient<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    let mut grad = vec![0.0; point.len()];
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}
