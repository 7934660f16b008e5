//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and whatever it needs
//! for the backward pass. `backward` walks the tape once, newest to oldest,
//! so gradient accumulation order depends only on construction order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats, ConvGeometry};
use crate::params::ParamStore;
use crate::tensor::{Precision, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    BatchNormTrain { x: Var, scale: Var, shift: Var, stats: BatchStats },
    BatchNormEval { x: Var, scale: Var, shift: Var, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, alpha: f64 },
    Concat { a: Var, b: Var },
    AddAt { base: Var, delta: Var, offset: usize },
    Slice { x: Var, start: usize },
    AvgPool { x: Var, window: usize, stride: usize },
    MaxPool { x: Var, window: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Dot { x: Var, weights: Tensor },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode<'a> {
    Train { eps: f64 },
    Eval { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Shape-level summary of one executed operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub inputs: Vec<Shape>,
    pub output: Shape,
    /// Pooling window, 0 for other ops.
    pub window: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    precision: Precision,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            precision,
            backward_done: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.round_to(self.precision);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Smallest `|x|` over all ReLU inputs recorded so far; finite
    /// differences are unreliable when this is below the step size.
    pub fn relu_kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Sign of every ReLU input recorded so far, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(self.value(x).data().iter().map(|&v| v > 0.0).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Executed operations in tape order, leaves excluded.
    pub fn records(&self) -> Vec<OpRecord> {
        let sh = |v: &Var| self.shape(*v);
        self.nodes
            .iter()
            .filter_map(|n| {
                let (kind, inputs, window) = match &n.op {
                    Op::Leaf => return None,
                    Op::Conv2d { x, k, .. } => ("conv2d", vec![sh(x), sh(k)], 0),
                    Op::BatchNormTrain { x, .. } | Op::BatchNormEval { x, .. } => ("batch_norm", vec![sh(x)], 0),
                    Op::Relu { x } => ("relu", vec![sh(x)], 0),
                    Op::Add { a, b } => ("add", vec![sh(a), sh(b)], 0),
                    Op::Scale { x, .. } => ("scale", vec![sh(x)], 0),
                    Op::Concat { a, b } => ("channel_concat", vec![sh(a), sh(b)], 0),
                    Op::AddAt { base, delta, .. } => ("channel_add_at", vec![sh(base), sh(delta)], 0),
                    Op::Slice { x, .. } => ("channel_slice", vec![sh(x)], 0),
                    Op::AvgPool { x, window, .. } => ("avg_pool", vec![sh(x)], *window),
                    Op::MaxPool { x, window, .. } => ("max_pool", vec![sh(x)], *window),
                    Op::GlobalAvgPool { x } => ("global_avg_pool", vec![sh(x)], 0),
                    Op::Linear { x, w, b } => ("linear", vec![sh(x), sh(w), sh(b)], 0),
                    Op::SoftmaxCe { logits, .. } => ("softmax_cross_entropy", vec![sh(logits)], 0),
                    Op::Dropout { x, .. } => ("dropout", vec![sh(x)], 0),
                    Op::Dot { x, .. } => ("dot", vec![sh(x)], 0),
                    Op::Sum { x } => ("sum", vec![sh(x)], 0),
                };
                Some(OpRecord { kind, inputs, output: n.value.shape(), window })
            })
            .collect()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry { stride, pad };
        let y = kernels::conv2d(self.value(x), self.value(k), geom)?;
        let rg = self.rg(&[x, k]);
        Ok(self.push(y, Op::Conv2d { x, k, geom }, rg))
    }

    /// Batch normalization. In training mode the batch statistics are
    /// returned so the caller can update running averages.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let rg = self.rg(&[x, scale, shift]);
        let (gs, bs) = (self.value(scale).data(), self.value(shift).data());
        match mode {
            BnMode::Train { eps } => {
                let (y, stats) = kernels::batch_norm_train(self.value(x), gs, bs, eps)?;
                let out = stats.clone();
                Ok((self.push(y, Op::BatchNormTrain { x, scale, shift, stats }, rg), Some(out)))
            }
            BnMode::Eval { mean, var, eps } => {
                let y = kernels::batch_norm_eval(self.value(x), gs, bs, mean, var, eps)?;
                let op = Op::BatchNormEval {
                    x,
                    scale,
                    shift,
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    eps,
                };
                Ok((self.push(y, op, rg), None))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let y = self.value(x).scale(alpha);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale { x, alpha }, rg)
    }

    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::channel_concat(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    pub fn channel_add_at(&mut self, base: Var, delta: Var, offset: usize) -> Result<Var> {
        let y = kernels::channel_add_at(self.value(base), self.value(delta), offset)?;
        let rg = self.rg(&[base, delta]);
        Ok(self.push(y, Op::AddAt { base, delta, offset }, rg))
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).channel_range(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Slice { x, start }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let y = kernels::avg_pool(self.value(x), window, stride)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::AvgPool { x, window, stride }, rg))
    }

    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = kernels::max_pool(self.value(x), window, stride, pad)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::MaxPool { x, window, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::GlobalAvgPool { x }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Inverted dropout driven by an explicit keep/scale mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                detail: format!("mask of {} for {}", mask.len(), xv.shape()),
            });
        }
        let mut y = xv.clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Dropout { x, mask }, rg))
    }

    /// Scalar `Σ x ⊙ weights`, a convenient probe loss.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                detail: format!("{} vs {}", xv.shape(), weights.shape()),
            });
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Propagates `∂loss/∂v` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(ls, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(e) => e.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        // Split borrow: the op is read while grads are written.
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(self.value(*x), self.value(*k), *geom, g);
                out.push((*x, dx));
                out.push((*k, dk));
            }
            Op::BatchNormTrain { x, scale, shift, stats } => {
                let sv = self.value(*scale).data();
                let (dx, ds, db) = kernels::batch_norm_train_backward(self.value(*x), sv, stats, g);
                out.push((*x, dx));
                out.push((*scale, vec_like(self.value(*scale), ds)));
                out.push((*shift, vec_like(self.value(*shift), db)));
            }
            Op::BatchNormEval { x, scale, shift, mean, var, eps } => {
                let sv = self.value(*scale).data();
                let (dx, ds, db) = kernels::batch_norm_eval_backward(self.value(*x), sv, mean, var, *eps, g);
                out.push((*x, dx));
                out.push((*scale, vec_like(self.value(*scale), ds)));
                out.push((*shift, vec_like(self.value(*shift), db)));
            }
            Op::Relu { x } => out.push((*x, kernels::relu_backward(self.value(*x), g))),
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale { x, alpha } => out.push((*x, g.scale(*alpha))),
            Op::Concat { a, b } => {
                let ca = self.shape(*a).c();
                let cb = self.shape(*b).c();
                if self.needs(*a) {
                    out.push((*a, g.channel_range(0, ca).expect("concat grad")));
                }
                if self.needs(*b) {
                    out.push((*b, g.channel_range(ca, cb).expect("concat grad")));
                }
            }
            Op::AddAt { base, delta, offset } => {
                if self.needs(*delta) {
                    let c = self.shape(*delta).c();
                    out.push((*delta, g.channel_range(*offset, c).expect("add_at grad")));
                }
                out.push((*base, g.clone()));
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let len = g.shape().c();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n() {
                    for c in 0..len {
                        dx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                    }
                }
                out.push((*x, dx));
            }
            Op::AvgPool { x, window, stride } => {
                out.push((*x, kernels::avg_pool_backward(self.shape(*x), *window, *stride, g)));
            }
            Op::MaxPool { x, argmax, .. } => {
                out.push((*x, kernels::max_pool_backward(self.shape(*x), argmax, g)));
            }
            Op::GlobalAvgPool { x } => {
                out.push((*x, kernels::global_avg_pool_backward(self.shape(*x), g)));
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                out.push((*x, dx));
                out.push((*w, dw));
                let bs = self.shape(*b);
                out.push((*b, Tensor::from_vec(bs, db.into_vec()).expect("bias grad")));
            }
            Op::SoftmaxCe { logits, labels } => {
                let d = kernels::softmax_cross_entropy_backward(self.value(*logits), labels);
                out.push((*logits, d.scale(g.item())));
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                out.push((*x, dx));
            }
            Op::Dot { x, weights } => out.push((*x, weights.scale(g.item()))),
            Op::Sum { x } => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
        }
        for (v, t) in out {
            self.acc(v, t);
        }
    }
}

fn vec_like(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(like.shape(), data).expect("per-channel gradient")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Batch-norm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    /// Weight of the newest batch in the running averages.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { eps: 1e-5, momentum: 0.1 }
    }
}

/// One forward (and optionally backward) evaluation: a fresh graph bound to
/// a parameter store. Parameters enter the graph once each, on first use.
pub struct Session<'p> {
    pub graph: Graph,
    pub params: &'p mut ParamStore,
    pub mode: Mode,
    pub bn: BnConfig,
    /// Dropout rate applied by [`Session::dropout`]; 0 disables.
    pub dropout: f64,
    param_vars: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p mut ParamStore, mode: Mode) -> Self {
        Session {
            graph: Graph::default(),
            params,
            mode,
            bn: BnConfig::default(),
            dropout: 0.0,
            param_vars: HashMap::new(),
            param_order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.graph = Graph::new(precision);
        self
    }

    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        self.dropout = rate;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_bn(mut self, bn: BnConfig) -> Self {
        self.bn = bn;
        self
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Graph node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = self.params.value(name)?.clone();
        let v = self.graph.leaf(t);
        self.param_vars.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let k = self.param(name)?;
        self.graph.conv2d(x, k, stride, pad)
    }

    /// Batch norm with parameters `{prefix}.scale`/`{prefix}.shift` and
    /// buffers `{prefix}.running_mean`/`{prefix}.running_var`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let eps = self.bn.eps;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, scale, shift, BnMode::Train { eps })?;
                let stats = stats.expect("train-mode stats");
                let mom = self.bn.momentum;
                let m = stats.count as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for (r, b) in self.params.buffer_mut(&mean_key)?.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - mom) * *r + mom * b;
                }
                for (r, b) in self.params.buffer_mut(&var_key)?.iter_mut().zip(&stats.var) {
                    *r = (1.0 - mom) * *r + mom * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.buffer(&mean_key)?.to_vec();
                let var = self.params.buffer(&var_key)?.to_vec();
                let mode = BnMode::Eval { mean: &mean, var: &var, eps };
                Ok(self.graph.batch_norm(x, scale, shift, mode)?.0)
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.graph.relu(x)
    }

    /// Inverted dropout in training mode at the session rate; identity
    /// otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.dropout);
        let n = self.graph.value(x).numel();
        let rate = self.dropout;
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.graph.dropout_with_mask(x, mask)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, b)
    }

    /// Runs backward from `loss` and accumulates parameter gradients into
    /// the store, in first-use order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)?;
        for (name, v) in &self.param_order {
            if let Some(g) = self.graph.grad(*v) {
                self.params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

/// Standalone dropout on a tensor, for use outside a graph.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut impl Rng) -> Tensor {
    if mode == Mode::Eval || rate <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = if rng.random::<f64>() < rate { 0.0 } else { *v * keep };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(c: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, c, 1, v.len() / c), v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::default();
        let x = g.leaf(t(1, &[1.0, -2.0, 3.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::default();
        let x = g.leaf(t(1, &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::default();
        let x = g.leaf(t(1, &[1.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(Error::BackwardTwice));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::default();
        let x = g.leaf(t(1, &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn concat_backward_splits_by_range() {
        let mut g = Graph::default();
        let a = g.leaf(Tensor::full(Shape::new(2, 3, 2, 2), 1.0));
        let b = g.leaf(Tensor::full(Shape::new(2, 2, 2, 2), 2.0));
        let y = g.channel_concat(a, b).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn add_at_routes_delta_slice() {
        let mut g = Graph::default();
        let base = g.leaf(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let delta = g.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let y = g.channel_add_at(base, delta, 1).unwrap();
        let w = t(4, &[1.0, 2.0, 3.0, 4.0]);
        let l = g.dot(y, w).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(delta).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(g.grad(base).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |[_, c, h, w]| (c + h * w) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout(&x, 0.0, Mode::Train, &mut rng).bit_eq(&x));
        assert!(dropout(&x, 0.5, Mode::Eval, &mut rng).bit_eq(&x));
    }

    #[test]
    fn dropout_preserves_mean_in_expectation() {
        let x = Tensor::full(Shape::new(1, 1, 100, 100), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = dropout(&x, 0.2, Mode::Train, &mut rng);
        let mean = y.sum() / y.numel() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn session_bn_updates_running_stats() {
        let mut store = ParamStore::new();
        store.insert("bn.scale", Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        store.insert("bn.shift", Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        store.insert_buffer("bn.running_mean", vec![0.0]).unwrap();
        store.insert_buffer("bn.running_var", vec![1.0]).unwrap();
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        s.batch_norm(x, "bn").unwrap();
        drop(s);
        assert!((store.buffer("bn.running_mean").unwrap()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance 2.0
        assert!((store.buffer("bn.running_var").unwrap()[0] - 1.1).abs() < 1e-15);
    }
}
