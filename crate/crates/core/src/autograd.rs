//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass. Nodes are appended in execution
//! order, so reverse insertion order is a valid reverse topological order.
//! Trainable state lives in a [`ParamStore`]; the graph copies parameter
//! values in when they are used and writes gradients back on
//! [`Graph::backward`], skipping frozen parameters.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, BatchNormContext};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to; training phases freeze by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Holistic,
    HolisticHead,
    FrameExtractor,
    RelationMlp,
    RelationHead,
    Fusion,
    FusionHead,
    Other,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Holistic => "holistic",
            ParamGroup::HolisticHead => "holistic-head",
            ParamGroup::FrameExtractor => "frame-extractor",
            ParamGroup::RelationMlp => "relation-mlp",
            ParamGroup::RelationHead => "relation-head",
            ParamGroup::Fusion => "fusion",
            ParamGroup::FusionHead => "fusion-head",
            ParamGroup::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        let grad = Tensor::from_parts(value.shape().to_vec(), vec![0.0; value.len()], Precision::F64);
        Parameter {
            name: name.into(),
            group,
            value,
            grad,
            frozen: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, group, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {}: shape {:?} cannot take {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value.to_precision(p.value.precision());
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freezes every parameter whose group is not in `trainable`, unfreezes the rest.
    pub fn set_trainable(&mut self, trainable: &[ParamGroup]) {
        for p in &mut self.params {
            p.frozen = !trainable.contains(&p.group);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).count()
    }

    pub fn grad_norm(&self, group: ParamGroup) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Backward function of a user-defined node: maps the output gradient and
/// the input values to one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor]) -> Result<Vec<Tensor>> + Send + Sync>;

enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: [usize; 2],
        pad: [usize; 2],
    },
    MaxPool3d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool3d {
        input: NodeId,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        ctx: Box<BatchNormContext>,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Mask {
        input: NodeId,
        mask: Vec<f64>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Hadamard {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Maximum {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Reshape {
        input: NodeId,
    },
    Gather {
        input: NodeId,
        map: Vec<usize>,
    },
    Sum {
        input: NodeId,
    },
    SumLastAxis {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Custom {
        inputs: Vec<NodeId>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool3d { .. } => "maxpool3d",
            Op::GlobalAvgPool3d { .. } => "global_avgpool3d",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "linear",
            Op::Mask { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Hadamard { .. } => "hadamard",
            Op::Add { .. } => "add",
            Op::Maximum { .. } => "maximum",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
            Op::SumLastAxis { .. } => "sum_last_axis",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Whether batch statistics and dropout are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a node, if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<ParamId>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            param,
            requires_grad,
        });
        self.backward_done = false;
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, None, false)
    }

    /// An input whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, None, true)
    }

    /// A parameter read from `store`. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf, Some(id), !p.frozen)
    }

    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: [usize; 3], pad: [usize; 3]) -> Result<NodeId> {
        let out = ops::conv3d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let rg = self.needs(&[input, weight, bias]);
        self.push(out, Op::Conv3d { input, weight, bias, stride, pad }, None, rg)
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: [usize; 2], pad: [usize; 2]) -> Result<NodeId> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let rg = self.needs(&[input, weight, bias]);
        self.push(out, Op::Conv2d { input, weight, bias, stride, pad }, None, rg)
    }

    pub fn maxpool3d(&mut self, input: NodeId, kernel: [usize; 3], stride: [usize; 3]) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool3d(self.value(input), kernel, stride)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::MaxPool3d { input, argmax }, None, rg)
    }

    pub fn global_avgpool3d(&mut self, input: NodeId, kernel: [usize; 3]) -> Result<NodeId> {
        let out = ops::global_avgpool3d(self.value(input), kernel)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::GlobalAvgPool3d { input }, None, rg)
    }

    /// Batch normalization in training mode. Returns the output node and the
    /// batch mean and (biased) variance so the caller can update running stats.
    pub fn batchnorm_train(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, Vec<f64>, Vec<f64>, usize)> {
        let (out, ctx) = ops::batchnorm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let (mean, var, count) = (ctx.mean.clone(), ctx.var.clone(), ctx.count);
        let rg = self.needs(&[input, gamma, beta]);
        let id = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                ctx: Box::new(ctx),
            },
            None,
            rg,
        )?;
        Ok((id, mean, var, count))
    }

    pub fn batchnorm_eval(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, running_mean: &[f64], running_var: &[f64], eps: f64) -> Result<NodeId> {
        let (out, inv_std) = ops::batchnorm_eval(self.value(input), self.value(gamma), self.value(beta), running_mean, running_var, eps)?;
        let rg = self.needs(&[input, gamma, beta]);
        self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean: running_mean.to_vec(),
                inv_std,
            },
            None,
            rg,
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::relu(self.value(input));
        let rg = self.needs(&[input]);
        self.push(out, Op::Relu { input }, None, rg)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(&[input, weight, bias]);
        self.push(out, Op::Linear { input, weight, bias }, None, rg)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, rate: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::input(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let mask = ops::dropout_mask(self.value(input).len(), rate, rng);
        self.masked(input, mask)
    }

    /// Multiplies elementwise by a fixed mask.
    pub fn masked(&mut self, input: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(Error::dim("mask length differs from input"));
        }
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts_rounded(x.shape().to_vec(), data, x.precision());
        let rg = self.needs(&[input]);
        self.push(out, Op::Mask { input, mask }, None, rg)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        let rg = self.needs(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            None,
            rg,
        )
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::hadamard(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Hadamard { a, b }, None, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add { a, b }, None, rg)
    }

    /// Elementwise maximum; gradient goes to `a` on ties.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::maximum(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Maximum { a, b }, None, rg)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(input).scale(factor);
        let rg = self.needs(&[input]);
        self.push(out, Op::Scale { input, factor }, None, rg)
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).reshape(shape)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Reshape { input }, None, rg)
    }

    fn gather(&mut self, input: NodeId, map: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let out = ops::gather(self.value(input), &map, shape);
        let rg = self.needs(&[input]);
        self.push(out, Op::Gather { input, map }, None, rg)
    }

    pub fn permute(&mut self, input: NodeId, perm: &[usize]) -> Result<NodeId> {
        let (map, shape) = ops::permute_map(self.shape(input), perm)?;
        self.gather(input, map, &shape)
    }

    /// Picks `indices` (in the given order) along `axis`.
    pub fn select(&mut self, input: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let (map, shape) = ops::select_map(self.shape(input), axis, indices)?;
        self.gather(input, map, &shape)
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let indices: Vec<usize> = (start..start + len).collect();
        self.select(input, axis, &indices)
    }

    /// Nearest-neighbour resize of the (T, H, W) axes of a 5-rank node.
    pub fn resize_nearest(&mut self, input: NodeId, target: [usize; 3]) -> Result<NodeId> {
        let (map, shape) = ops::resize_nearest_map(self.shape(input), target)?;
        self.gather(input, map, &shape)
    }

    /// Sum of all elements as a `[1]` node.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let out = Tensor::from_parts_rounded(vec![1], vec![x.sum()], x.precision());
        let rg = self.needs(&[input]);
        self.push(out, Op::Sum { input }, None, rg)
    }

    pub fn sum_last_axis(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::sum_last_axis(self.value(input))?;
        let rg = self.needs(&[input]);
        self.push(out, Op::SumLastAxis { input }, None, rg)
    }

    /// Mean cross-entropy as a `[1]` node; also returns the class probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<(NodeId, Tensor)> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let precision = self.value(logits).precision();
        let rg = self.needs(&[logits]);
        let id = self.push(
            Tensor::from_parts_rounded(vec![1], vec![loss], precision),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
            None,
            rg,
        )?;
        Ok((id, probs))
    }

    /// Records a node computed outside the built-in kernels.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, backward: CustomBackward) -> Result<NodeId> {
        let rg = self.needs(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            None,
            rg,
        )
    }

    /// Reverse accumulation from a `[1]`-shaped loss node. Gradients of
    /// parameter leaves are added into `store` unless the parameter is frozen.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this recording; run a new forward pass first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a single-element loss"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::from_parts(vec![1], vec![1.0], Precision::F64));

        for i in (0..=loss.0).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &grad)?;
            self.grads[i] = Some(grad);
            for (target, g) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.grads[target.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &self.grads[i]) {
                let p = store.get_mut(pid);
                if !p.frozen {
                    p.grad.add_assign(g);
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn node_backward(&self, i: usize, grad: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let v = |id: NodeId| &self.nodes[id.0].value;
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d { input, weight, bias, stride, pad } => {
                let (gi, gw, gb) = ops::conv3d_backward(v(*input), v(*weight), grad, *stride, *pad, rg(*input))?;
                let mut out = vec![(*weight, gw), (*bias, gb)];
                out.extend(gi.map(|g| (*input, g)));
                out
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let (gi, gw, gb) = ops::conv2d_backward(v(*input), v(*weight), grad, *stride, *pad, rg(*input))?;
                let mut out = vec![(*weight, gw), (*bias, gb)];
                out.extend(gi.map(|g| (*input, g)));
                out
            }
            Op::MaxPool3d { input, argmax } => {
                vec![(*input, ops::maxpool3d_backward(v(*input).shape(), argmax, grad))]
            }
            Op::GlobalAvgPool3d { input } => {
                vec![(*input, ops::global_avgpool3d_backward(v(*input).shape(), grad))]
            }
            Op::BatchNormTrain { input, gamma, beta, ctx } => {
                let (gi, gg, gb) = ops::batchnorm_train_backward(grad, v(*gamma), ctx);
                vec![(*input, gi), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean,
                inv_std,
            } => {
                let g = v(*gamma).data();
                let factors: Vec<f64> = g.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                let gi = ops::channel_scale(grad, &factors);
                // d/dgamma = sum(grad * (x - mean) * inv_std)
                let x = v(*input);
                let (outer, ch) = (x.shape()[0], x.shape()[1]);
                let inner = x.len() / (outer * ch);
                let mut normalized = x.data().to_vec();
                for o in 0..outer {
                    for c in 0..ch {
                        normalized[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                            .iter_mut()
                            .for_each(|e| *e = (*e - running_mean[c]) * inv_std[c]);
                    }
                }
                let normalized = Tensor::from_parts(x.shape().to_vec(), normalized, Precision::F64);
                vec![
                    (*input, gi),
                    (*gamma, ops::channel_sum(grad, Some(&normalized))),
                    (*beta, ops::channel_sum(grad, None)),
                ]
            }
            Op::Relu { input } => vec![(*input, ops::relu_backward(v(*input), grad))],
            Op::Linear { input, weight, bias } => {
                let (gi, gw, gb) = ops::linear_backward(v(*input), v(*weight), grad, rg(*input));
                let mut out = vec![(*weight, gw), (*bias, gb)];
                out.extend(gi.map(|g| (*input, g)));
                out
            }
            Op::Mask { input, mask } => {
                let data = grad.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                vec![(*input, Tensor::from_parts(grad.shape().to_vec(), data, Precision::F64))]
            }
            Op::Concat { parts, axis } => {
                let extents: Vec<usize> = parts.iter().map(|&p| v(p).shape()[*axis]).collect();
                parts.iter().copied().zip(ops::split(grad, *axis, &extents)).collect()
            }
            Op::Hadamard { a, b } => {
                let ga = zip(grad, v(*b), |g, y| g * y);
                let gb = zip(grad, v(*a), |g, x| g * x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add { a, b } => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Maximum { a, b } => {
                let (xa, xb) = (v(*a).data(), v(*b).data());
                let take_a: Vec<bool> = xa.iter().zip(xb).map(|(p, q)| p >= q).collect();
                let ga = grad.data().iter().zip(&take_a).map(|(&g, &t)| if t { g } else { 0.0 }).collect();
                let gb = grad.data().iter().zip(&take_a).map(|(&g, &t)| if t { 0.0 } else { g }).collect();
                vec![
                    (*a, Tensor::from_parts(grad.shape().to_vec(), ga, Precision::F64)),
                    (*b, Tensor::from_parts(grad.shape().to_vec(), gb, Precision::F64)),
                ]
            }
            Op::Scale { input, factor } => {
                let data = grad.data().iter().map(|g| g * factor).collect();
                vec![(*input, Tensor::from_parts(grad.shape().to_vec(), data, Precision::F64))]
            }
            Op::Reshape { input } => {
                vec![(*input, Tensor::from_parts(v(*input).shape().to_vec(), grad.data().to_vec(), Precision::F64))]
            }
            Op::Gather { input, map } => vec![(*input, ops::gather_backward(v(*input).shape(), map, grad))],
            Op::Sum { input } => {
                let x = v(*input);
                vec![(*input, Tensor::from_parts(x.shape().to_vec(), vec![grad.data()[0]; x.len()], Precision::F64))]
            }
            Op::SumLastAxis { input } => vec![(*input, ops::sum_last_axis_backward(v(*input).shape(), grad))],
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                vec![(*logits, ops::softmax_cross_entropy_backward(probs, labels, grad.data()[0]))]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&p| v(p)).collect();
                let grads = backward(grad, &values)?;
                if grads.len() != inputs.len() || grads.iter().zip(&values).any(|(g, x)| g.shape() != x.shape()) {
                    return Err(Error::dim("custom backward returned gradients of the wrong shape"));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data, Precision::F64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_scalar_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Other, Tensor::scalar(3.0));
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let loss = g.sum(wn).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[1.0]);
    }

    #[test]
    fn hadamard_gradient_is_the_other_factor() {
        let mut store = ParamStore::new();
        let a = Tensor::from_fn(&[4], |i| i as f64 + 1.0);
        let b = Tensor::from_fn(&[4], |i| 0.5 - i as f64);
        let mut g = Graph::new();
        let an = g.leaf(a).unwrap();
        let bn = g.input(b.clone()).unwrap();
        let h = g.hadamard(an, bn).unwrap();
        let loss = g.sum(h).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(g.grad(an).unwrap().data(), b.data());
        assert!(g.grad(bn).is_none());
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2])).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(matches!(g.backward(loss, &mut store), Err(Error::State(_))));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Holistic, Tensor::ones(&[3]));
        let u = store.add("u", ParamGroup::Fusion, Tensor::ones(&[3]));
        store.set_trainable(&[ParamGroup::Fusion]);
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let un = g.param(&store, u).unwrap();
        let h = g.hadamard(wn, un).unwrap();
        let loss = g.sum(h).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
        assert!(store.get(u).grad.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shared_node_accumulates() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3], |i| i as f64)).unwrap();
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
