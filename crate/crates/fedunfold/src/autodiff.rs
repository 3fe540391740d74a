//! Reverse-mode autodiff over dense arrays.
//!
//! A [`Tape`] is an append-only list of nodes; each node stores its op, its
//! input node ids (always earlier ids, so the tape is topological by
//! construction) and its forward value, computed eagerly. [`Tape::backward`]
//! runs one reverse sweep from a scalar seed and returns adjoints for every
//! reached node.
//!
//! The op set is deliberately small: enough to express MLP forward passes,
//! their closed-form gradients as graph ops, SGD steps, weighted averaging,
//! and scalar losses. Because the loss *gradient* is itself built from these
//! primitives, a single reverse sweep differentiates through entire local
//! training runs without any second-order machinery.

use crate::error::{Error, Result};
use crate::linalg::{self, Array};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Node operation. Static attributes (scale factors, slice bounds,
/// availability masks) live in the variant.
#[derive(Debug, Clone)]
pub enum OpKind {
    /// Leaf that never receives a gradient.
    Constant,
    /// Trainable leaf; backward always reports an adjoint for it.
    Leaf,
    MatMul,
    Add,
    Sub,
    /// Elementwise product of same-shaped arrays.
    Mul,
    /// Multiply by a compile-time constant.
    ScaleConst(f64),
    /// Multiply an array by a scalar node (first input is the scalar).
    ScaleNode,
    Relu,
    /// Indicator of positivity; treated as locally constant in backward.
    ReluMask,
    Transpose,
    /// Column sums, NxC -> 1xC.
    ColSum,
    Sum,
    Mean,
    /// Mean squared error of (prediction, target) -> scalar.
    Mse,
    /// Row-wise softmax; with a mask, excluded columns get zero weight and
    /// the rest renormalize.
    SoftmaxRow(Option<Vec<bool>>),
    StopGradient,
    /// Inputs: one 1xK weight row followed by K same-shaped arrays.
    WeightedSum,
    /// Row range copy.
    SliceRows { start: usize, len: usize },
    Reshape { rows: usize, cols: usize },
    /// Stack inputs (equal column counts) by rows.
    ConcatRows,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub value: Array,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward sweep, indexed by node id.
#[derive(Debug)]
pub struct GradientMap {
    adjoints: Vec<Option<Array>>,
}

impl GradientMap {
    /// Adjoint of a node, if the reverse sweep reached it.
    pub fn adjoint(&self, id: NodeId) -> Option<&Array> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Array) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{:?} produced a non-finite value at node {}",
                kind,
                self.nodes.len()
            )));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { kind, inputs, value });
        Ok(id)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(OpKind::Constant, vec![], value)
            .expect("constants must be finite")
    }

    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(OpKind::Leaf, vec![], value)
            .expect("leaves must be finite")
    }

    /// Apply one op to existing nodes; computes the forward value eagerly
    /// and appends a node. Shape or finiteness violations are errors.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Shape(format!("input node {} out of range", id.0)));
            }
        }
        let arity_err = |kind: &OpKind, want: &str, got: usize| {
            Error::Shape(format!("{kind:?} expects {want} inputs, got {got}"))
        };
        let value = match &kind {
            OpKind::Constant | OpKind::Leaf => {
                return Err(Error::Shape(
                    "leaves are created with Tape::constant / Tape::leaf".into(),
                ))
            }
            OpKind::MatMul => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(&kind, "2", inputs.len()))?;
                linalg::matmul(self.value(a), self.value(b))?
            }
            OpKind::Add => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(&kind, "2", inputs.len()))?;
                linalg::add(self.value(a), self.value(b))?
            }
            OpKind::Sub => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(&kind, "2", inputs.len()))?;
                linalg::sub(self.value(a), self.value(b))?
            }
            OpKind::Mul => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(&kind, "2", inputs.len()))?;
                linalg::mul(self.value(a), self.value(b))?
            }
            OpKind::ScaleConst(f) => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                linalg::scale(self.value(a), *f)
            }
            OpKind::ScaleNode => {
                let [s, a] = two(inputs).ok_or_else(|| arity_err(&kind, "2", inputs.len()))?;
                if !self.value(s).is_scalar() {
                    return Err(Error::Shape("ScaleNode scalar input must be 1x1".into()));
                }
                linalg::scale(self.value(a), self.value(s).scalar_value())
            }
            OpKind::Relu => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                linalg::relu(self.value(a))
            }
            OpKind::ReluMask => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                linalg::relu_mask(self.value(a))
            }
            OpKind::Transpose => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                linalg::transpose(self.value(a))
            }
            OpKind::ColSum => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                linalg::colsum(self.value(a))
            }
            OpKind::Sum => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                Array::scalar(linalg::sum(self.value(a)))
            }
            OpKind::Mean => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                Array::scalar(linalg::mean(self.value(a)))
            }
            OpKind::Mse => {
                let [p, t] = two(inputs).ok_or_else(|| arity_err(&kind, "2", inputs.len()))?;
                Array::scalar(linalg::mse(self.value(p), self.value(t))?)
            }
            OpKind::SoftmaxRow(mask) => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                linalg::softmax_rows(self.value(a), mask.as_deref())?
            }
            OpKind::StopGradient => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                self.value(a).clone()
            }
            OpKind::WeightedSum => {
                if inputs.len() < 2 {
                    return Err(arity_err(&kind, "1 weight row + >=1 array", inputs.len()));
                }
                let w = self.value(inputs[0]);
                let k = inputs.len() - 1;
                if w.rows() != 1 || w.cols() != k {
                    return Err(Error::Shape(format!(
                        "WeightedSum weight row is {}x{}, expected 1x{k}",
                        w.rows(),
                        w.cols()
                    )));
                }
                let shape = self.value(inputs[1]).shape();
                let mut out = Array::zeros(shape.0, shape.1);
                for (i, &id) in inputs[1..].iter().enumerate() {
                    let a = self.value(id);
                    if a.shape() != shape {
                        return Err(Error::Shape(
                            "WeightedSum inputs must share one shape".into(),
                        ));
                    }
                    out.axpy(self.value(inputs[0]).get(0, i), a);
                }
                out
            }
            OpKind::SliceRows { start, len } => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                let v = self.value(a);
                if start + len > v.rows() {
                    return Err(Error::Shape(format!(
                        "SliceRows {start}..{} of {} rows",
                        start + len,
                        v.rows()
                    )));
                }
                let cols = v.cols();
                let data = v.data()[start * cols..(start + len) * cols].to_vec();
                Array::from_vec(*len, cols, data)
            }
            OpKind::Reshape { rows, cols } => {
                let [a] = one(inputs).ok_or_else(|| arity_err(&kind, "1", inputs.len()))?;
                self.value(a).reshaped(*rows, *cols)?
            }
            OpKind::ConcatRows => {
                if inputs.is_empty() {
                    return Err(arity_err(&kind, ">=1", 0));
                }
                let cols = self.value(inputs[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &id in inputs {
                    let v = self.value(id);
                    if v.cols() != cols {
                        return Err(Error::Shape(
                            "ConcatRows inputs must share a column count".into(),
                        ));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Array::from_vec(rows, cols, data)
            }
        };
        self.push(kind, inputs.to_vec(), value)
    }

    // Convenience wrappers.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale_const(&mut self, a: NodeId, f: f64) -> Result<NodeId> {
        self.apply(OpKind::ScaleConst(f), &[a])
    }
    pub fn scale_node(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ScaleNode, &[s, a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn relu_mask(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ReluMask, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn colsum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ColSum, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mse, &[pred, target])
    }
    pub fn softmax_row(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxRow(mask), &[a])
    }
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::StopGradient, &[a])
    }
    pub fn weighted_sum(&mut self, weights: NodeId, arrays: &[NodeId]) -> Result<NodeId> {
        let mut inputs = Vec::with_capacity(arrays.len() + 1);
        inputs.push(weights);
        inputs.extend_from_slice(arrays);
        self.apply(OpKind::WeightedSum, &inputs)
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(OpKind::SliceRows { start, len }, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.apply(OpKind::Reshape { rows, cols }, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::ConcatRows, parts)
    }

    /// Reverse sweep from a scalar seed node. Stop-gradient nodes pass no
    /// adjoint to their inputs; trainable leaves always end up with an
    /// adjoint, zero if the seed does not depend on them.
    pub fn backward(&self, seed: NodeId) -> Result<GradientMap> {
        let seed_node = self
            .nodes
            .get(seed.0)
            .ok_or_else(|| Error::Shape(format!("seed node {} out of range", seed.0)))?;
        if !seed_node.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward seed must be scalar, got {}x{}",
                seed_node.value.rows(),
                seed_node.value.cols()
            )));
        }
        let mut adjoints: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adjoints[seed.0] = Some(Array::scalar(1.0));

        for id in (0..=seed.0).rev() {
            let grad = match adjoints[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            self.accumulate_inputs(node, &grad, &mut adjoints);
            adjoints[id] = Some(grad);
        }

        // Trainable leaves report a zero adjoint when unreached.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, OpKind::Leaf) && adjoints[id].is_none() {
                adjoints[id] = Some(Array::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(GradientMap { adjoints })
    }

    fn accumulate_inputs(&self, node: &Node, grad: &Array, adjoints: &mut [Option<Array>]) {
        let mut acc = |id: NodeId, delta: Array| {
            match &mut adjoints[id.0] {
                Some(a) => a.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            };
        };
        match &node.kind {
            OpKind::Constant | OpKind::Leaf | OpKind::StopGradient | OpKind::ReluMask => {}
            OpKind::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let bt = linalg::transpose(self.value(b));
                let at = linalg::transpose(self.value(a));
                acc(a, linalg::matmul(grad, &bt).expect("backward matmul"));
                acc(b, linalg::matmul(&at, grad).expect("backward matmul"));
            }
            OpKind::Add => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                acc(a, grad.clone());
                let bv = self.value(b);
                if bv.shape() == grad.shape() {
                    acc(b, grad.clone());
                } else {
                    // Row-broadcast bias: reduce over rows.
                    acc(b, linalg::colsum(grad));
                }
            }
            OpKind::Sub => {
                acc(node.inputs[0], grad.clone());
                acc(node.inputs[1], linalg::scale(grad, -1.0));
            }
            OpKind::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                acc(a, linalg::mul(grad, self.value(b)).expect("backward mul"));
                acc(b, linalg::mul(grad, self.value(a)).expect("backward mul"));
            }
            OpKind::ScaleConst(f) => acc(node.inputs[0], linalg::scale(grad, *f)),
            OpKind::ScaleNode => {
                let (s, a) = (node.inputs[0], node.inputs[1]);
                let dot = linalg::mul(grad, self.value(a)).expect("backward scale");
                acc(s, Array::scalar(linalg::sum(&dot)));
                acc(a, linalg::scale(grad, self.value(s).scalar_value()));
            }
            OpKind::Relu => {
                let mask = linalg::relu_mask(self.value(node.inputs[0]));
                acc(node.inputs[0], linalg::mul(grad, &mask).expect("backward relu"));
            }
            OpKind::Transpose => acc(node.inputs[0], linalg::transpose(grad)),
            OpKind::ColSum => {
                let x = self.value(node.inputs[0]);
                let mut delta = Array::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        delta.set(r, c, grad.get(0, c));
                    }
                }
                acc(node.inputs[0], delta);
            }
            OpKind::Sum => {
                let g = grad.scalar_value();
                let x = self.value(node.inputs[0]);
                acc(node.inputs[0], x.map(|_| g));
            }
            OpKind::Mean => {
                let x = self.value(node.inputs[0]);
                let g = grad.scalar_value() / x.len() as f64;
                acc(node.inputs[0], x.map(|_| g));
            }
            OpKind::Mse => {
                let (p, t) = (node.inputs[0], node.inputs[1]);
                let diff = linalg::sub(self.value(p), self.value(t)).expect("backward mse");
                let g = grad.scalar_value() * 2.0 / diff.len() as f64;
                acc(p, linalg::scale(&diff, g));
                acc(t, linalg::scale(&diff, -g));
            }
            OpKind::SoftmaxRow(_) => {
                // d/dz_j = y_j * (g_j - sum_i g_i y_i), row by row; masked
                // columns have y = 0 and so receive zero.
                let y = &node.value;
                let mut delta = Array::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = 0.0;
                    for c in 0..y.cols() {
                        dot += grad.get(r, c) * y.get(r, c);
                    }
                    for c in 0..y.cols() {
                        delta.set(r, c, y.get(r, c) * (grad.get(r, c) - dot));
                    }
                }
                acc(node.inputs[0], delta);
            }
            OpKind::WeightedSum => {
                let w = self.value(node.inputs[0]);
                let k = node.inputs.len() - 1;
                let mut wgrad = Array::zeros(1, k);
                for i in 0..k {
                    let a = self.value(node.inputs[1 + i]);
                    let dot = linalg::mul(grad, a).expect("backward weighted sum");
                    wgrad.set(0, i, linalg::sum(&dot));
                    acc(node.inputs[1 + i], linalg::scale(grad, w.get(0, i)));
                }
                acc(node.inputs[0], wgrad);
            }
            OpKind::SliceRows { start, len } => {
                let x = self.value(node.inputs[0]);
                let cols = x.cols();
                let mut delta = Array::zeros(x.rows(), cols);
                for r in 0..*len {
                    for c in 0..cols {
                        delta.set(start + r, c, grad.get(r, c));
                    }
                }
                acc(node.inputs[0], delta);
            }
            OpKind::Reshape { .. } => {
                let x = self.value(node.inputs[0]);
                acc(
                    node.inputs[0],
                    grad.reshaped(x.rows(), x.cols()).expect("backward reshape"),
                );
            }
            OpKind::ConcatRows => {
                let cols = grad.cols();
                let mut row = 0;
                for &id in &node.inputs {
                    let part_rows = self.value(id).rows();
                    let mut delta = Array::zeros(part_rows, cols);
                    for r in 0..part_rows {
                        for c in 0..cols {
                            delta.set(r, c, grad.get(row + r, c));
                        }
                    }
                    acc(id, delta);
                    row += part_rows;
                }
            }
        }
    }
}

fn one(inputs: &[NodeId]) -> Option<[NodeId; 1]> {
    match inputs {
        [a] => Some([*a]),
        _ => None,
    }
}

fn two(inputs: &[NodeId]) -> Option<[NodeId; 2]> {
    match inputs {
        [a, b] => Some([*a, *b]),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, max_rel_err};

    fn leaf_vec(tape: &mut Tape, v: &[f64]) -> NodeId {
        tape.leaf(Array::col_vec(v.to_vec()))
    }

    /// Gradient-check harness: builds a scalar out of one trainable leaf with
    /// `build`, then compares backward against central finite differences.
    fn grad_check(
        shape: (usize, usize),
        x: &[f64],
        build: impl Fn(&mut Tape, NodeId) -> NodeId,
    ) {
        let eval = |v: &[f64]| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(Array::from_vec(shape.0, shape.1, v.to_vec()));
            let out = build(&mut tape, leaf);
            tape.value(out).scalar_value()
        };
        let want = central_diff(eval, x, 1e-4);

        let mut tape = Tape::new();
        let leaf = tape.leaf(Array::from_vec(shape.0, shape.1, x.to_vec()));
        let out = build(&mut tape, leaf);
        let grads = tape.backward(out).unwrap();
        let got = grads.adjoint(leaf).unwrap().data().to_vec();
        let err = max_rel_err(&got, &want);
        assert!(err <= 1e-3, "gradient check failed: rel err {err}");
    }

    #[test]
    fn matmul_forward_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Array::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(Array::col_vec(vec![7.0, 8.0, 9.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), (2, 1));
        assert_eq!(tape.value(y).data(), &[50.0, 122.0]);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[1.5, -2.0]);
        let y = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0]);
    }

    #[test]
    fn weighted_sum_mean_example() {
        let mut tape = Tape::new();
        let w = tape.constant(Array::row_vec(vec![0.5, 0.5]));
        let a = tape.constant(Array::col_vec(vec![2.0]));
        let b = tape.constant(Array::col_vec(vec![4.0]));
        let y = tape.weighted_sum(w, &[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.adjoint(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn stop_gradient_detaches_one_factor() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let frozen = tape.stop_gradient(x).unwrap();
        let y = tape.mul(frozen, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.adjoint(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_adjoint() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let unused = tape.leaf(Array::col_vec(vec![1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.adjoint(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradcheck_matmul_chain() {
        let x = [0.3, -0.7, 1.2, 0.5, -0.1, 0.9];
        grad_check((2, 3), &x, |tape, leaf| {
            let w = tape.constant(Array::from_vec(3, 2, vec![0.2, -0.4, 0.6, 0.1, -0.3, 0.8]));
            let y = tape.matmul(leaf, w).unwrap();
            tape.sum(y).unwrap()
        });
    }

    #[test]
    fn gradcheck_add_sub_mul_scale() {
        let x = [0.4, -1.1, 0.8, 0.2];
        grad_check((2, 2), &x, |tape, leaf| {
            let c = tape.constant(Array::from_vec(2, 2, vec![0.5, 1.5, -0.5, 2.0]));
            let a = tape.add(leaf, c).unwrap();
            let s = tape.sub(a, leaf).unwrap();
            let m = tape.mul(s, leaf).unwrap();
            let sc = tape.scale_const(m, 1.7).unwrap();
            tape.mean(sc).unwrap()
        });
    }

    #[test]
    fn gradcheck_bias_broadcast_add() {
        let x = [0.2, -0.6];
        grad_check((1, 2), &x, |tape, leaf| {
            let big = tape.constant(Array::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
            let y = tape.add(big, leaf).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum(sq).unwrap()
        });
    }

    #[test]
    fn gradcheck_relu() {
        // Stay away from the kink at zero.
        let x = [0.7, -0.9, 1.4, -0.3];
        grad_check((4, 1), &x, |tape, leaf| {
            let y = tape.relu(leaf).unwrap();
            tape.sum(y).unwrap()
        });
    }

    #[test]
    fn gradcheck_transpose_colsum() {
        let x = [0.3, 0.9, -0.2, 1.1, 0.5, -0.8];
        grad_check((2, 3), &x, |tape, leaf| {
            let t = tape.transpose(leaf).unwrap();
            let cs = tape.colsum(t).unwrap();
            let sq = tape.mul(cs, cs).unwrap();
            tape.sum(sq).unwrap()
        });
    }

    #[test]
    fn gradcheck_mse() {
        let x = [0.1, 0.7, -0.4, 0.9];
        grad_check((2, 2), &x, |tape, leaf| {
            let target = tape.constant(Array::from_vec(2, 2, vec![0.0, 1.0, 0.5, -0.5]));
            tape.mse(leaf, target).unwrap()
        });
    }

    #[test]
    fn gradcheck_softmax_row() {
        let x = [0.2, -0.5, 0.9];
        grad_check((1, 3), &x, |tape, leaf| {
            let sm = tape.softmax_row(leaf, None).unwrap();
            let c = tape.constant(Array::row_vec(vec![1.0, -2.0, 0.5]));
            let m = tape.mul(sm, c).unwrap();
            tape.sum(m).unwrap()
        });
    }

    #[test]
    fn gradcheck_masked_softmax_row() {
        let x = [0.2, -0.5, 0.9];
        grad_check((1, 3), &x, |tape, leaf| {
            let sm = tape.softmax_row(leaf, Some(vec![true, false, true])).unwrap();
            let c = tape.constant(Array::row_vec(vec![1.0, -2.0, 0.5]));
            let m = tape.mul(sm, c).unwrap();
            tape.sum(m).unwrap()
        });
    }

    #[test]
    fn gradcheck_scale_node() {
        let x = [0.6];
        grad_check((1, 1), &x, |tape, leaf| {
            let a = tape.constant(Array::col_vec(vec![1.0, -2.0, 3.0]));
            let y = tape.scale_node(leaf, a).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum(sq).unwrap()
        });
    }

    #[test]
    fn gradcheck_weighted_sum_weights_and_arrays() {
        let x = [0.3, 0.7];
        grad_check((1, 2), &x, |tape, leaf| {
            let a = tape.constant(Array::col_vec(vec![1.0, 2.0]));
            let b = tape.constant(Array::col_vec(vec![-1.0, 0.5]));
            let y = tape.weighted_sum(leaf, &[a, b]).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum(sq).unwrap()
        });
    }

    #[test]
    fn gradcheck_slice_reshape_concat() {
        let x = [0.4, -0.2, 0.9, 1.3];
        grad_check((4, 1), &x, |tape, leaf| {
            let top = tape.slice_rows(leaf, 0, 2).unwrap();
            let bottom = tape.slice_rows(leaf, 2, 2).unwrap();
            let mat = tape.reshape(top, 1, 2).unwrap();
            let matb = tape.reshape(bottom, 2, 1).unwrap();
            let prod = tape.matmul(mat, matb).unwrap();
            let cat = tape.concat_rows(&[top, bottom]).unwrap();
            let s = tape.sum(cat).unwrap();
            tape.add(prod, s).unwrap()
        });
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g), exactly.
        let (a, b) = (2.5, -1.25);
        let build = |tape: &mut Tape| {
            let x = tape.leaf(Array::col_vec(vec![0.7, -0.3, 1.1]));
            let sq = tape.mul(x, x).unwrap();
            let f = tape.sum(sq).unwrap();
            let g = tape.mean(x).unwrap();
            (x, f, g)
        };

        let mut tape = Tape::new();
        let (x, f, g) = build(&mut tape);
        let fa = tape.scale_const(f, a).unwrap();
        let gb = tape.scale_const(g, b).unwrap();
        let combo = tape.add(fa, gb).unwrap();
        let combined = tape.backward(combo).unwrap();

        let gf = tape.backward(f).unwrap();
        let gg = tape.backward(g).unwrap();
        for i in 0..3 {
            let want = a * gf.adjoint(x).unwrap().data()[i] + b * gg.adjoint(x).unwrap().data()[i];
            let got = combined.adjoint(x).unwrap().data()[i];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Array::from_vec(2, 2, vec![0.3, 0.1, -0.2, 0.7]));
            let w = tape.constant(Array::from_vec(2, 2, vec![1.0, 0.5, -0.5, 0.25]));
            let y = tape.matmul(x, w).unwrap();
            let r = tape.relu(y).unwrap();
            let s = tape.softmax_row(r, None).unwrap();
            let out = tape.sum(s).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn seed_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::col_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Array::zeros(2, 3));
        let b = tape.constant(Array::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Array::scalar(1e308));
        let big = tape.scale_const(a, 1e10);
        assert!(matches!(big, Err(crate::Error::NonFinite(_))));
    }
}
