//! Fully connected network: forward pass, loss, and closed-form gradients,
//! both as plain array code and as tape ops.
//!
//! The tape variant ([`loss_grad_graph`]) is what makes local SGD steps
//! differentiable end to end: the gradient of the training loss is emitted
//! as graph primitives, so a later reverse sweep can differentiate through
//! it without second-order support.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{self, Array};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    CrossEntropy,
}

/// Flat parameter vector plus the layer shapes that interpret it.
/// Packing order per layer: weights (n_in x n_out, row-major), then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer_sizes: Vec<usize>,
    pub theta: Vec<f64>,
}

/// One labeled batch; targets are one-hot rows for classification.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array,
    pub targets: Array,
}

/// Total parameter count d for a stack of affine layers.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// (weight offset, weight len, bias offset, bias len) per layer.
fn layer_offsets(layer_sizes: &[usize]) -> Vec<(usize, usize, usize, usize)> {
    let mut offsets = Vec::with_capacity(layer_sizes.len().saturating_sub(1));
    let mut cursor = 0;
    for w in layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        offsets.push((cursor, n_in * n_out, cursor + n_in * n_out, n_out));
        cursor += (n_in + 1) * n_out;
    }
    offsets
}

fn validate_layers(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(
            "model needs at least an input and an output layer".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    Ok(())
}

/// Deterministic initialization: weights uniform in +-1/sqrt(n_in) per
/// layer, biases zero. Same seed, same parameters.
pub fn mlp_init(layer_sizes: &[usize], seed: u64) -> Result<ModelParams> {
    validate_layers(layer_sizes)?;
    let mut stream = rng::stream(seed, &[purpose::MODEL_INIT]);
    let mut theta = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let bound = 1.0 / (n_in as f64).sqrt();
        for _ in 0..n_in * n_out {
            let u: f64 = stream.gen();
            theta.push((2.0 * u - 1.0) * bound);
        }
        theta.extend(std::iter::repeat_n(0.0, n_out));
    }
    Ok(ModelParams {
        layer_sizes: layer_sizes.to_vec(),
        theta,
    })
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    fn layer(&self, idx: usize) -> (Array, Array) {
        let offs = layer_offsets(&self.layer_sizes);
        let (w_off, w_len, b_off, b_len) = offs[idx];
        let (n_in, n_out) = (self.layer_sizes[idx], self.layer_sizes[idx + 1]);
        let w = Array::from_vec(n_in, n_out, self.theta[w_off..w_off + w_len].to_vec());
        let b = Array::row_vec(self.theta[b_off..b_off + b_len].to_vec());
        (w, b)
    }
}

/// Affine + ReLU per hidden layer, affine output layer. No output
/// nonlinearity; the row softmax lives inside the cross-entropy loss.
pub fn mlp_forward(params: &ModelParams, inputs: &Array) -> Result<Array> {
    if inputs.cols() != params.layer_sizes[0] {
        return Err(Error::Shape(format!(
            "input width {} vs first layer {}",
            inputs.cols(),
            params.layer_sizes[0]
        )));
    }
    let layers = params.layer_sizes.len() - 1;
    let mut z = inputs.clone();
    for l in 0..layers {
        let (w, b) = params.layer(l);
        let s = linalg::add(&linalg::matmul(&z, &w)?, &b)?;
        z = if l + 1 < layers { linalg::relu(&s) } else { s };
    }
    Ok(z)
}

pub fn loss_eval(params: &ModelParams, batch: &Batch, kind: LossKind) -> Result<f64> {
    let out = mlp_forward(params, &batch.inputs)?;
    if out.shape() != batch.targets.shape() {
        return Err(Error::Shape("loss target shape".into()));
    }
    match kind {
        LossKind::Mse => linalg::mse(&out, &batch.targets),
        LossKind::CrossEntropy => {
            let probs = linalg::softmax_rows(&out, None)?;
            let n = out.rows();
            let mut total = 0.0;
            for r in 0..n {
                for c in 0..out.cols() {
                    if batch.targets.get(r, c) > 0.0 {
                        total -= batch.targets.get(r, c) * probs.get(r, c).max(1e-300).ln();
                    }
                }
            }
            Ok(total / n as f64)
        }
    }
}

/// Closed-form backprop; returns a flat gradient of length d.
pub fn loss_grad(params: &ModelParams, batch: &Batch, kind: LossKind) -> Result<Vec<f64>> {
    let layers = params.layer_sizes.len() - 1;
    if batch.inputs.cols() != params.layer_sizes[0] {
        return Err(Error::Shape("loss_grad input width".into()));
    }

    // Forward, keeping pre-activations and activations.
    let mut pre = Vec::with_capacity(layers);
    let mut act = Vec::with_capacity(layers + 1);
    act.push(batch.inputs.clone());
    for l in 0..layers {
        let (w, b) = params.layer(l);
        let s = linalg::add(&linalg::matmul(&act[l], &w)?, &b)?;
        let z = if l + 1 < layers { linalg::relu(&s) } else { s.clone() };
        pre.push(s);
        act.push(z);
    }

    let out = &act[layers];
    if out.shape() != batch.targets.shape() {
        return Err(Error::Shape("loss_grad target shape".into()));
    }
    let n = out.rows() as f64;
    let mut delta = match kind {
        LossKind::Mse => linalg::scale(
            &linalg::sub(out, &batch.targets)?,
            2.0 / (n * out.cols() as f64),
        ),
        LossKind::CrossEntropy => linalg::scale(
            &linalg::sub(&linalg::softmax_rows(out, None)?, &batch.targets)?,
            1.0 / n,
        ),
    };

    let mut grad = vec![0.0; params.dim()];
    let offs = layer_offsets(&params.layer_sizes);
    for l in (0..layers).rev() {
        let gw = linalg::matmul(&linalg::transpose(&act[l]), &delta)?;
        let gb = linalg::colsum(&delta);
        let (w_off, w_len, b_off, b_len) = offs[l];
        grad[w_off..w_off + w_len].copy_from_slice(gw.data());
        grad[b_off..b_off + b_len].copy_from_slice(gb.data());
        if l > 0 {
            let (w, _) = params.layer(l);
            let back = linalg::matmul(&delta, &linalg::transpose(&w))?;
            delta = linalg::mul(&back, &linalg::relu_mask(&pre[l - 1]))?;
        }
    }
    Ok(grad)
}

/// Per-layer (weights, bias) nodes sliced out of a flat dx1 parameter node.
fn unpack_graph(
    tape: &mut Tape,
    params_node: NodeId,
    layer_sizes: &[usize],
) -> Result<Vec<(NodeId, NodeId)>> {
    let offs = layer_offsets(layer_sizes);
    let mut out = Vec::with_capacity(offs.len());
    for (l, (w_off, w_len, b_off, b_len)) in offs.iter().enumerate() {
        let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
        let w_flat = tape.slice_rows(params_node, *w_off, *w_len)?;
        let w = tape.reshape(w_flat, n_in, n_out)?;
        let b_flat = tape.slice_rows(params_node, *b_off, *b_len)?;
        let b = tape.reshape(b_flat, 1, n_out)?;
        out.push((w, b));
    }
    Ok(out)
}

/// Forward pass as tape ops; `inputs_node` is an n x p node and
/// `params_node` a flat dx1 node.
pub fn forward_graph(
    tape: &mut Tape,
    params_node: NodeId,
    layer_sizes: &[usize],
    inputs_node: NodeId,
) -> Result<NodeId> {
    validate_layers(layer_sizes)?;
    let params = unpack_graph(tape, params_node, layer_sizes)?;
    let layers = params.len();
    let mut z = inputs_node;
    for (l, (w, b)) in params.into_iter().enumerate() {
        let prod = tape.matmul(z, w)?;
        let s = tape.add(prod, b)?;
        z = if l + 1 < layers { tape.relu(s)? } else { s };
    }
    Ok(z)
}

/// Scalar training-loss node. Only the squared-error loss is representable
/// on the tape; it is also the loss the weight training optimizes.
pub fn loss_graph(
    tape: &mut Tape,
    params_node: NodeId,
    layer_sizes: &[usize],
    inputs_node: NodeId,
    targets_node: NodeId,
    kind: LossKind,
) -> Result<NodeId> {
    if kind != LossKind::Mse {
        return Err(Error::Config(
            "only the mse loss can be expressed as a graph loss".into(),
        ));
    }
    let out = forward_graph(tape, params_node, layer_sizes, inputs_node)?;
    tape.mse(out, targets_node)
}

/// Emits the closed-form loss gradient as graph ops and returns the dx1
/// gradient node. Its forward value equals [`loss_grad`]; because it is
/// built from primitives, backward() differentiates through it.
pub fn loss_grad_graph(
    tape: &mut Tape,
    params_node: NodeId,
    layer_sizes: &[usize],
    inputs_node: NodeId,
    targets_node: NodeId,
    kind: LossKind,
) -> Result<NodeId> {
    validate_layers(layer_sizes)?;
    let params = unpack_graph(tape, params_node, layer_sizes)?;
    let layers = params.len();

    let mut pre = Vec::with_capacity(layers);
    let mut act = Vec::with_capacity(layers + 1);
    act.push(inputs_node);
    for (l, (w, b)) in params.iter().enumerate() {
        let prod = tape.matmul(act[l], *w)?;
        let s = tape.add(prod, *b)?;
        let z = if l + 1 < layers { tape.relu(s)? } else { s };
        pre.push(s);
        act.push(z);
    }

    let out = act[layers];
    let n = tape.value(out).rows() as f64;
    let c = tape.value(out).cols() as f64;
    let mut delta = match kind {
        LossKind::Mse => {
            let diff = tape.sub(out, targets_node)?;
            tape.scale_const(diff, 2.0 / (n * c))?
        }
        LossKind::CrossEntropy => {
            let probs = tape.softmax_row(out, None)?;
            let diff = tape.sub(probs, targets_node)?;
            tape.scale_const(diff, 1.0 / n)?
        }
    };

    let mut grads_rev = Vec::with_capacity(layers);
    for l in (0..layers).rev() {
        let act_t = tape.transpose(act[l])?;
        let gw = tape.matmul(act_t, delta)?;
        let gb = tape.colsum(delta)?;
        grads_rev.push((gw, gb));
        if l > 0 {
            let w_t = tape.transpose(params[l].0)?;
            let back = tape.matmul(delta, w_t)?;
            let mask = tape.relu_mask(pre[l - 1])?;
            delta = tape.mul(back, mask)?;
        }
    }

    // Flatten into the ModelParams packing order.
    let mut parts = Vec::with_capacity(2 * layers);
    for (l, (gw, gb)) in grads_rev.into_iter().rev().enumerate() {
        let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
        parts.push(tape.reshape(gw, n_in * n_out, 1)?);
        parts.push(tape.reshape(gb, n_out, 1)?);
    }
    tape.concat_rows(&parts)
}

/// One-hot encode labels into n x c targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Array {
    let mut t = Array::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        t.set(r, l, 1.0);
    }
    t
}
