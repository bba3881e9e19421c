//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output and whatever its backward pass needs, and returns a
//! [`NodeId`]. Inputs always precede the nodes that use them, so creation
//! order is a topological order and [`Graph::backward`] just walks it in
//! reverse.

use crate::conv::{self, ConvPlan, ConvSpec};
use crate::error::{Error, Result};
use crate::nn::{self, BnStats};
use crate::stereo;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv(ConvPlan),
    BatchNorm {
        normalized: Tensor<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        batch_stats: bool,
    },
    Relu,
    Add,
    Mul,
    Scale(T),
    Sum,
    Reshape,
    Softmax {
        axis: usize,
    },
    Expectation {
        axis: usize,
    },
    CostVolume {
        half_disparities: usize,
    },
    Upsample2 {
        axis: usize,
    },
    L1 {
        target: Tensor<T>,
        weights: Vec<T>,
    },
    CrossEntropy {
        probs: Tensor<T>,
        targets: Tensor<T>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv(p) if p.transposed => "conv_transposed",
            Op::Conv(_) => "conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Expectation { .. } => "expectation",
            Op::CostVolume { .. } => "cost_volume",
            Op::Upsample2 { .. } => "upsample2",
            Op::L1 { .. } => "l1_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss w.r.t. every node that reaches it.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zero when it does not reach the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Packed signs of every ReLU input and every L1 residual. Two evaluations
    /// with equal signatures lie on the same linear piece of those kinks.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut word = 0u64;
        let mut n = 0;
        let mut push = |b: bool| {
            word |= (b as u64) << (n % 64);
            n += 1;
            if n % 64 == 0 {
                bits.push(word);
                word = 0;
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    for &v in self.nodes[node.inputs[0].0].value.data() {
                        push(v > T::zero());
                    }
                }
                Op::L1 { target, .. } => {
                    let pred = &self.nodes[node.inputs[0].0].value;
                    for (&p, &t) in pred.data().iter().zip(target.data()) {
                        push(p > t);
                    }
                }
                _ => {}
            }
        }
        bits.push(word);
        bits
    }

    /// Mean and biased variance used by a batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean,
                var,
                batch_stats: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// Forward or transposed convolution, dispatched on `spec.transposed`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        self.conv_to(x, w, b, spec, None)
    }

    pub fn conv_to(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: &ConvSpec,
        out_extents: Option<[usize; 3]>,
    ) -> Result<NodeId> {
        let op = if spec.transposed { "conv3d_transposed" } else { "conv" };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let plan = conv::plan(op, xv, spec, wv, bv, out_extents)?;
        let y = conv::run(&plan, xv, wv, bv);
        Ok(self.push(Op::Conv(plan), vec![x, w, b], y))
    }

    /// Batch normalization with batch statistics (`running == None`) or stored ones.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, running: Option<(&[T], &[T])>) -> Result<NodeId> {
        let stats = match running {
            None => BnStats::Batch,
            Some((m, v)) => BnStats::Running(m, v),
        };
        let out = nn::batch_norm(self.value(x), self.value(gamma), self.value(beta), stats)?;
        Ok(self.push(
            Op::BatchNorm {
                normalized: out.normalized,
                inv_std: out.inv_std,
                mean: out.mean,
                var: out.var,
                batch_stats: running.is_none(),
            },
            vec![x, gamma, beta],
            out.output,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = nn::relu(self.value(x));
        self.push(Op::Relu, vec![x], y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(Op::Add, vec![a, b], y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(Op::Mul, vec![a, b], y))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let y = self.value(x).scale(s);
        self.push(Op::Scale(s), vec![x], y)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], y)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], y))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let y = nn::softmax_axis(self.value(x), axis)?;
        Ok(self.push(Op::Softmax { axis }, vec![x], y))
    }

    /// `Σ_i i · x_i` along `axis`, which is removed from the shape.
    pub fn expectation(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let y = stereo::index_expectation(self.value(x), axis)?;
        Ok(self.push(Op::Expectation { axis }, vec![x], y))
    }

    /// Concatenation cost volume `[Dmax/2, H', W', 2F]` from two `[H', W', F]` feature maps.
    pub fn cost_volume(&mut self, left: NodeId, right: NodeId, max_disparity: usize) -> Result<NodeId> {
        let y = stereo::build_cost_volume(self.value(left), self.value(right), max_disparity)?;
        let half_disparities = y.shape()[0];
        Ok(self.push(Op::CostVolume { half_disparities }, vec![left, right], y))
    }

    /// Linear ×2 upsampling along one axis (half-pixel centers, edge clamped).
    pub fn upsample2(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let y = stereo::upsample2(self.value(x), axis)?;
        Ok(self.push(Op::Upsample2 { axis }, vec![x], y))
    }

    /// Masked mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: NodeId, target: &Tensor<T>, mask: &[bool]) -> Result<NodeId> {
        let p = self.value(pred);
        p.expect_same_shape("l1_loss", target)?;
        let weights = stereo::mask_weights::<T>(mask, p.len())?;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .zip(&weights)
            .fold(T::zero(), |acc, ((&a, &b), &w)| acc + w * (a - b).abs());
        Ok(self.push(
            Op::L1 {
                target: target.clone(),
                weights,
            },
            vec![pred],
            Tensor::scalar(loss),
        ))
    }

    /// Masked mean cross entropy between `softmax(-costs)` over axis 0 and
    /// per-pixel target distributions of the same `[D, H, W]` shape.
    pub fn cross_entropy(&mut self, costs: NodeId, targets: &Tensor<T>, mask: &[bool]) -> Result<NodeId> {
        let c = self.value(costs);
        c.expect_same_shape("cross_entropy", targets)?;
        if c.rank() != 3 {
            return Err(Error::shape("cross_entropy", "rank", 3, c.rank()));
        }
        let pixels = c.shape()[1] * c.shape()[2];
        let weights = stereo::mask_weights::<T>(mask, pixels)?;
        let (loss, probs) = stereo::cross_entropy(c, targets, &weights)?;
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                targets: targets.clone(),
                weights,
            },
            vec![costs],
            Tensor::scalar(loss),
        ))
    }

    /// Gradients of the scalar `loss` w.r.t. every node on a path to it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", "loss", "scalar", format!("{:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                for (input, g) in self.node_backward(node, &dy)? {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let ins = &node.inputs;
        let val = |k: usize| self.value(ins[k]);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv(plan) => {
                let (dx, dw, db) = conv::backward(plan, val(0), val(1), dy, self.needs(ins[0]));
                let mut out = vec![(ins[1], dw), (ins[2], db)];
                if let Some(dx) = dx {
                    out.push((ins[0], dx));
                }
                out
            }
            Op::BatchNorm {
                normalized,
                inv_std,
                batch_stats,
                ..
            } => {
                let gamma = val(1).data();
                let c = gamma.len();
                let rows = dy.len() / c;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (g, h) in dy.data().chunks_exact(c).zip(normalized.data().chunks_exact(c)) {
                    for ch in 0..c {
                        dbeta[ch] += g[ch];
                        dgamma[ch] += g[ch] * h[ch];
                    }
                }
                let mut dx = Vec::with_capacity(dy.len());
                if *batch_stats {
                    let m = T::from_usize(rows).expect("rows");
                    for (g, h) in dy.data().chunks_exact(c).zip(normalized.data().chunks_exact(c)) {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch] / m;
                            dx.push(k * (m * g[ch] - dbeta[ch] - h[ch] * dgamma[ch]));
                        }
                    }
                } else {
                    for g in dy.data().chunks_exact(c) {
                        for ch in 0..c {
                            dx.push(g[ch] * gamma[ch] * inv_std[ch]);
                        }
                    }
                }
                vec![
                    (ins[0], Tensor::new(dy.shape(), dx)?),
                    (ins[1], Tensor::new(&[c], dgamma)?),
                    (ins[2], Tensor::new(&[c], dbeta)?),
                ]
            }
            Op::Relu => {
                let dx = val(0).zip_map(dy, |x, g| if x > T::zero() { g } else { T::zero() })?;
                vec![(ins[0], dx)]
            }
            Op::Add => vec![(ins[0], dy.clone()), (ins[1], dy.clone())],
            Op::Mul => vec![
                (ins[0], dy.zip_map(val(1), |g, b| g * b)?),
                (ins[1], dy.zip_map(val(0), |g, a| g * a)?),
            ],
            Op::Scale(s) => vec![(ins[0], dy.scale(*s))],
            Op::Sum => vec![(ins[0], Tensor::full(val(0).shape(), dy.item()))],
            Op::Reshape => vec![(ins[0], dy.clone().reshape(val(0).shape())?)],
            Op::Softmax { axis } => vec![(ins[0], stereo::softmax_backward(&node.value, dy, *axis))],
            Op::Expectation { axis } => {
                vec![(ins[0], stereo::index_expectation_backward(val(0).shape(), dy, *axis))]
            }
            Op::CostVolume { half_disparities } => {
                let (dl, dr) = stereo::cost_volume_backward(val(0).shape(), dy, *half_disparities);
                vec![(ins[0], dl), (ins[1], dr)]
            }
            Op::Upsample2 { axis } => vec![(ins[0], stereo::upsample2_backward(val(0).shape(), dy, *axis))],
            Op::L1 { target, weights } => {
                let g = dy.item();
                let data = val(0)
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let s = if p > t {
                            T::one()
                        } else if p < t {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g * w * s
                    })
                    .collect();
                vec![(ins[0], Tensor::new(val(0).shape(), data)?)]
            }
            Op::CrossEntropy {
                probs,
                targets,
                weights,
            } => vec![(ins[0], stereo::cross_entropy_backward(probs, targets, weights, dy.item()))],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2, 2], vec![1.0f64, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[3], vec![-1.0f64, 2.0, 0.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::<f64>::ones(&[3]));
        let unused = g.variable(Tensor::ones(&[2, 2]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::<f64>::ones(&[3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2], vec![3.0f64, -1.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[6.0, -2.0]);
    }

    #[test]
    fn constants_block_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::<f64>::ones(&[2]));
        let v = g.variable(Tensor::ones(&[2]));
        let y = g.add(c, v).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(v).data(), &[1.0, 1.0]);
    }
}
