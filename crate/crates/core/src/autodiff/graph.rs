//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the graph cannot contain cycles.

use std::ops::Range;

use super::conv::{self, ConvSpec};
use super::norm::{self, BatchNormCache};
use super::params::{ParamId, ParamStore};
use super::pool::{self, PoolKind};
use crate::error::{ensure, Result};
use crate::objectives;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache,
    },
    BatchNormInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        ranges: Vec<Range<usize>>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddScaled {
        a: Var,
        b: Var,
        scale: f64,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    ClassificationLoss {
        pred: Var,
        targets: Vec<f64>,
    },
    GuidanceLoss {
        activation: Var,
        mask: Tensor,
        epsilon: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch-norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {:?}", op_name(&op));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let ng = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
            ng,
        ))
    }

    pub fn pool(&mut self, input: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        match kind {
            PoolKind::Average => self.avg_pool(input, window, stride),
            PoolKind::Max => self.max_pool(input, window, stride),
            PoolKind::GlobalAverage => self.global_avg_pool(input),
        }
    }

    pub fn avg_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let out = pool::avg_pool_forward(self.value(input), window, stride)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::AvgPool { input, window, stride }, ng))
    }

    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = pool::max_pool_forward(self.value(input), window, stride)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, ng))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = pool::global_avg_pool_forward(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, ng))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x.max(0.0));
        let ng = self.needs(input);
        self.push(out, Op::Relu { input }, ng)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(sigmoid);
        let ng = self.needs(input);
        self.push(out, Op::Sigmoid { input }, ng)
    }

    /// Training-mode batch normalization; returns the batch statistics so
    /// the caller can update running estimates.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (out, cache) =
            norm::batch_norm_train_forward(self.value(input), self.value(gamma), self.value(beta))?;
        let [n, _, h, w] = self.value(input).dims4()?;
        let stats = BatchStats {
            mean: cache.mean.clone(),
            var: cache.var.clone(),
            count: n * h * w,
        };
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<Var> {
        let (out, inv_std) = norm::batch_norm_infer_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean: running_mean.data().to_vec(),
                inv_std,
            },
            ng,
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat needs at least one input");
        let [n, _, h, w] = self.value(inputs[0]).dims4()?;
        let mut ranges = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let [ni, ci, hi, wi] = self.value(v).dims4()?;
            ensure!(
                ni == n && hi == h && wi == w,
                "concat spatial/batch mismatch: {:?} vs {:?}",
                self.value(v).shape(),
                self.value(inputs[0]).shape()
            );
            ranges.push(total..total + ci);
            total += ci;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (&v, r) in inputs.iter().zip(&ranges) {
                let ci = r.len();
                data.extend_from_slice(&self.value(v).data()[b * ci * hw..(b + 1) * ci * hw]);
            }
        }
        let out = Tensor::new(vec![n, total, h, w], data)?;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                ranges,
            },
            ng,
        ))
    }

    /// Channel range each input occupies in a concat output.
    pub fn concat_ranges(&self, v: Var) -> Option<&[Range<usize>]> {
        match &self.nodes[v.0].op {
            Op::Concat { ranges, .. } => Some(ranges),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "add shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// `a + scale * b`. With `scale == 0` no gradient flows into `b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "add shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + scale * y)
                .collect(),
        )?;
        let ng = self.needs(a) || (scale != 0.0 && self.needs(b));
        Ok(self.push(out, Op::AddScaled { a, b, scale }, ng))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|x| x * factor);
        let ng = self.needs(input);
        self.push(out, Op::Scale { input, factor }, ng)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let ng = self.needs(input);
        self.push(out, Op::Sum { input }, ng)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(input);
        self.push(out, Op::Mean { input }, ng)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::Reshape { input }, ng))
    }

    /// Mean binary cross entropy of probabilities `pred` against `targets`.
    pub fn classification_loss(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let value = objectives::classification_loss(targets, self.value(pred).data())?;
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::ClassificationLoss {
                pred,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean of `(1 - m) * ln(max(a, epsilon))` over every activation cell.
    pub fn guidance_loss(&mut self, activation: Var, mask: &Tensor, epsilon: f64) -> Result<Var> {
        let value = objectives::guidance_loss(self.value(activation), mask, epsilon)?;
        let ng = self.needs(activation);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GuidanceLoss {
                activation,
                mask: mask.clone(),
                epsilon,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            debug_assert!(t.all_finite(), "non-finite gradient into node {}", v.0);
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                if self.needs(*input) {
                    send(*input, conv::conv2d_backward_input(g, k, x.shape(), *spec)?);
                }
                if self.needs(*kernel) {
                    send(*kernel, conv::conv2d_backward_kernel(g, x, k.shape(), *spec)?);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        send(*b, conv::conv2d_backward_bias(g)?);
                    }
                }
            }
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                let shape = self.value(*input).shape();
                send(*input, pool::avg_pool_backward(g, shape, *window, *stride)?);
            }
            Op::MaxPool { input, argmax } => {
                let shape = self.value(*input).shape();
                send(*input, pool::max_pool_backward(g, shape, argmax));
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.value(*input).shape();
                send(*input, pool::global_avg_pool_backward(g, shape));
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                send(*input, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let d = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                send(*input, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = norm::batch_norm_train_backward(g, self.value(*gamma), cache)?;
                send(*input, dx);
                send(*gamma, dg);
                send(*beta, db);
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.dims4()?;
                let hw = h * w;
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; x.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dx[j] = g.data()[j] * gm[ch] * inv_std[ch];
                            dg[ch] += g.data()[j] * (x.data()[j] - mean[ch]) * inv_std[ch];
                            db[ch] += g.data()[j];
                        }
                    }
                }
                send(*input, Tensor::new(x.shape().to_vec(), dx)?);
                send(*gamma, Tensor::new(vec![c], dg)?);
                send(*beta, Tensor::new(vec![c], db)?);
            }
            Op::Concat { inputs, ranges } => {
                let [n, total, h, w] = g.dims4()?;
                let hw = h * w;
                for (&v, r) in inputs.iter().zip(ranges) {
                    let ci = r.len();
                    let mut d = Vec::with_capacity(n * ci * hw);
                    for b in 0..n {
                        let start = (b * total + r.start) * hw;
                        d.extend_from_slice(&g.data()[start..start + ci * hw]);
                    }
                    send(v, Tensor::new(vec![n, ci, h, w], d)?);
                }
            }
            Op::Add { a, b } => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddScaled { a, b, scale } => {
                send(*a, g.clone());
                if *scale != 0.0 {
                    send(*b, g.map(|v| v * scale));
                }
            }
            Op::Scale { input, factor } => send(*input, g.map(|v| v * factor)),
            Op::Sum { input } => {
                let gv = g.data()[0];
                send(*input, Tensor::full(self.value(*input).shape().to_vec(), gv));
            }
            Op::Mean { input } => {
                let t = self.value(*input);
                let gv = g.data()[0] / t.len() as f64;
                send(*input, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::Reshape { input } => {
                send(*input, g.clone().reshape(self.value(*input).shape().to_vec())?);
            }
            Op::ClassificationLoss { pred, targets } => {
                let p = self.value(*pred);
                let k = targets.len() as f64;
                let gv = g.data()[0];
                let d = p
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if p <= objectives::PROB_CLAMP || p >= 1.0 - objectives::PROB_CLAMP {
                            0.0
                        } else {
                            gv * (-y / p + (1.0 - y) / (1.0 - p)) / k
                        }
                    })
                    .collect();
                send(*pred, Tensor::new(p.shape().to_vec(), d)?);
            }
            Op::GuidanceLoss {
                activation,
                mask,
                epsilon,
            } => {
                let a = self.value(*activation);
                let norm = a.len() as f64;
                let gv = g.data()[0];
                let d = a
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(&a, &m)| {
                        if a > *epsilon {
                            gv * (1.0 - m) / (a * norm)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*activation, Tensor::new(a.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool { .. } => "avg_pool",
        Op::MaxPool { .. } => "max_pool",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::BatchNorm { .. } => "batch_norm",
        Op::BatchNormInfer { .. } => "batch_norm_infer",
        Op::Concat { .. } => "concat",
        Op::Add { .. } => "add",
        Op::AddScaled { .. } => "add_scaled",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Reshape { .. } => "reshape",
        Op::ClassificationLoss { .. } => "classification_loss",
        Op::GuidanceLoss { .. } => "guidance_loss",
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter leaf that influenced the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(i, id)| self.grads[i].as_ref().map(|g| (id, g)))
    }
}
