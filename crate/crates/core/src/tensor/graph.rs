use super::conv::{conv3d_backward, conv3d_forward};
use super::ops::{self, BnStats};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
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
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BnStats<T>,
    },
    BatchNormInfer {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    CropConcat(Vec<NodeId>),
    Softmax(NodeId),
    CrossEntropy {
        scores: NodeId,
        targets: Vec<u8>,
    },
    Sum(NodeId),
    Scale(NodeId, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only tape of tensor operations with reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. Gradients of interior nodes are
/// released as soon as they have been propagated; leaf gradients persist
/// until [`Graph::zero_grads`].
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter or an input under a gradient check).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Every node value in creation order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a node, zeros when the loss never reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<T> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Batch statistics recorded by a training-mode batch norm node.
    pub fn bn_stats(&self, id: NodeId) -> Option<&BnStats<T>> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { stats, .. } => Some(stats),
            _ => None,
        }
    }

    pub fn conv3d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = conv3d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(v, Op::Conv3d { input, kernel, bias }, rg))
    }

    pub fn batch_norm_train(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (v, stats) = ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta))?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            v,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn batch_norm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
    ) -> Result<NodeId> {
        let (v, inv_std) = ops::batch_norm_infer(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let rg = self.rg(&[input, gamma, beta]);
        let mean = running_mean.data().to_vec();
        Ok(self.push(
            v,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu_forward(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add_forward(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Channel concatenation in argument order; non-channel extents must match.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?);
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            let s = self.value(*p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let target = first.spatial().ok_or_else(|| Error::InvalidShape {
            op: "concat_channels",
            detail: format!("expected [D,H,W,C] or [N,D,H,W,C], got {:?}", first.shape()),
        })?;
        self.crop_concat(parts, target)
    }

    /// Spatially centered sub-block of extent `target`.
    pub fn crop_center(&mut self, x: NodeId, target: [usize; 3]) -> Result<NodeId> {
        self.crop_concat(&[x], target)
    }

    /// Center-crops each part to `target`, then concatenates channels.
    pub fn crop_concat(&mut self, parts: &[NodeId], target: [usize; 3]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ops::crop_concat_forward(&values, target)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::CropConcat(parts.to_vec()), rg))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let v = ops::softmax_forward(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Mean cross entropy of channel scores against integer class targets,
    /// one target per voxel in row-major order.
    pub fn cross_entropy(&mut self, scores: NodeId, targets: &[u8]) -> Result<NodeId> {
        let l = ops::cross_entropy_forward(self.value(scores), targets)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::scalar(l),
            Op::CrossEntropy {
                scores,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// Reverse sweep from a scalar loss. Returns the number of nodes whose
    /// backward rule ran.
    pub fn backward(&mut self, loss: NodeId) -> Result<usize> {
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.accumulate(loss, Tensor::ones(&shape));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &mut self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.take() else { continue };
            visited += 1;
            for (parent, g) in self.local_grads(i, &grad)? {
                self.accumulate(parent, g);
            }
        }
        Ok(visited)
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), node.value.shape());
        match &mut node.grad {
            None => node.grad = Some(g),
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    fn local_grads(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let need = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, bias } => {
                let want = [need(*input), need(*kernel), need(*bias)];
                let g = conv3d_backward(self.value(*input), self.value(*kernel), grad, want)?;
                out.extend(g.input.map(|t| (*input, t)));
                out.extend(g.kernel.map(|t| (*kernel, t)));
                out.extend(g.bias.map(|t| (*bias, t)));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) = ops::batch_norm_train_backward(self.value(*input), self.value(*gamma), stats, grad);
                out.extend([(*input, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dg, db) =
                    ops::batch_norm_infer_backward(self.value(*input), self.value(*gamma), mean, inv_std, grad);
                out.extend([(*input, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::Relu(x) => out.push((*x, ops::relu_backward(self.value(*x), grad))),
            Op::Add(a, b) => {
                out.push((*a, grad.clone()));
                out.push((*b, grad.clone()));
            }
            Op::CropConcat(parts) => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                out.extend(parts.iter().copied().zip(ops::crop_concat_backward(grad, &shapes)));
            }
            Op::Softmax(x) => out.push((*x, ops::softmax_backward(&node.value, grad))),
            Op::CrossEntropy { scores, targets } => {
                let up = grad.data()[0];
                out.push((*scores, ops::cross_entropy_backward(self.value(*scores), targets, up)));
            }
            Op::Sum(x) => {
                let up = grad.data()[0];
                out.push((*x, Tensor::full(self.value(*x).shape(), up)));
            }
            Op::Scale(x, c) => out.push((*x, grad.map(|g| g * *c))),
        }
        out.retain(|(id, _)| need(*id));
        Ok(out)
    }
}
