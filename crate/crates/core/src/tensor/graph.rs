//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation in insertion order; `backward` walks
//! the tape in exact reverse order. A graph is single-threaded; batch
//! parallelism uses one graph per example.

use rand::Rng;

use super::ops::{self, MatmulDims};
use super::{ParamGrads, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written backward pass, for fused kernels that live
/// outside this module (windowed attention).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order; `None` for
    /// inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var, MatmulDims),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var, usize),
    Sum(Var),
    MeanRows(Var),
    Dropout(Var, Vec<T>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Bce {
        logits: Var,
        targets: Vec<Option<T>>,
        weights: Vec<T>,
    },
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::GatherRows(..) => "gather_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::Dropout(..) => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "bce_with_logits",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph over an optional borrowed parameter store.
pub struct Graph<'p, T: Scalar = f32> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<'static, T> {
    pub fn new() -> Self {
        Graph {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            grads: None,
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf holding `value`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph was built without a parameter store");
        assert!(id.index() < store.len(), "parameter id out of range");
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").get(*id),
            (None, _) => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            bail!(Numeric, "{} produced a non-finite value", op.name());
        }
        let requires_grad = self.requires_grad(inputs);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            bail!(Dimension, "add shapes differ: {:?} vs {:?}", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `a + bias`, broadcasting a 1-D bias over the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rank() != 1 || x.shape().last() != Some(&b.numel()) {
            bail!(Dimension, "bias {:?} does not match last axis of {:?}", b.shape(), x.shape());
        }
        let n = b.numel();
        let data = x
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&p, &q)| p + q))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            bail!(Dimension, "mul shapes differ: {:?} vs {:?}", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect());
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = ops::matmul_dims(self.shape(a), self.shape(b))?;
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b, dims), &[a, b])
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (shape, src) = ops::permute_index(x.shape(), axes)?;
        let out = Tensor::from_parts(shape, src.iter().map(|&s| x.data()[s]).collect());
        self.push(out, Op::Permute(a, src), &[a])
    }

    /// Selects rows of `a` viewed as `[shape[0], rest]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(a), rows)?;
        self.push(out, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = ops::check_layer_norm::<T>(xv.shape(), gv.shape(), bv.shape(), eps)?;
        let stats = ops::layer_norm_stats(xv.data(), n, T::c(eps));
        let data = ops::layer_norm_apply(xv.data(), &stats, gv.data(), bv.data());
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean: stats.mean,
            rstd: stats.rstd,
        };
        self.push(out, op, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = ops::gelu(self.value(a));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(a), axis)?;
        self.push(out, Op::Softmax(a, axis), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over the leading axis: `[n, rest..] → [rest..]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 2 {
            bail!(Dimension, "mean_rows needs rank ≥ 2, got {:?}", x.shape());
        }
        let n = x.shape()[0];
        let cols = x.numel() / n;
        let mut acc = vec![T::zero(); cols];
        for row in x.data().chunks(cols) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
        }
        let inv = T::c(1.0 / n as f64);
        acc.iter_mut().for_each(|v| *v = *v * inv);
        let out = Tensor::from_parts(x.shape()[1..].to_vec(), acc);
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            bail!(Parameter, "dropout probability must be in [0, 1), got {p}");
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Dropout(a, mask), &[a])
    }

    /// Weighted mean softmax cross-entropy of `[batch, classes]` logits.
    /// `weights` are per-example; `None` means all ones.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let z = self.value(logits);
        let (batch, classes) = ops::check_targets(z.shape(), targets)?;
        let weights = resolve_weights(weights, batch)?;
        let total_w: T = weights.iter().copied().sum();
        let mut probs = z.data().to_vec();
        let mut loss = T::zero();
        for b in 0..batch {
            let row = &z.data()[b * classes..(b + 1) * classes];
            loss = loss + weights[b] * (ops::log_sum_exp(row) - row[targets[b]]);
            ops::softmax_in_place(&mut probs[b * classes..(b + 1) * classes]);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights,
            probs,
        };
        self.push(Tensor::scalar(loss / total_w), op, &[logits])
    }

    /// Weighted mean sigmoid cross-entropy over present targets; absent
    /// (`None`) targets are masked out. `weights` are per-element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Option<T>], weights: Option<&[T]>) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.numel() {
            bail!(Dimension, "{} targets for logits of shape {:?}", targets.len(), z.shape());
        }
        let weights = resolve_weights(weights, z.numel())?;
        let (mut loss, mut total_w) = (T::zero(), T::zero());
        for ((&zi, yi), &w) in z.data().iter().zip(targets).zip(&weights) {
            if let Some(y) = *yi {
                loss = loss + w * ops::bce_with_logits_scalar(zi, y);
                total_w = total_w + w;
            }
        }
        let value = if total_w > T::zero() { loss / total_w } else { T::zero() };
        let op = Op::Bce {
            logits,
            targets: targets.to_vec(),
            weights,
        };
        self.push(Tensor::scalar(value), op, &[logits])
    }

    /// Records a fused operation whose output was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.grads.is_some() {
            bail!(State, "backward already ran on this graph; call reset() first");
        }
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            bail!(Dimension, "backward root must be scalar, got shape {:?}", root_value.shape());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a = *a + c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let finished = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.value(Var(i)).shape().to_vec(), g)))
            .collect();
        self.grads = Some(finished);
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads = None;
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Gradients of every parameter used by the graph.
    pub fn param_grads(&self) -> Result<ParamGrads<T>> {
        let Some(grads) = &self.grads else {
            bail!(State, "param_grads() before backward()");
        };
        let mut out = ParamGrads::empty(self.param_vars.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads[v.0].as_ref()) {
                out.add_raw(ParamId(i), g.data());
            }
        }
        Ok(out)
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let out_value = self.nodes[i].value.as_ref().expect("op nodes own their value");
        Ok(match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias(a, b) => {
                let n = self.value(*b).numel();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc = *acc + v);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(y).map(|(&d, &v)| d * v).collect();
                let gb = g.iter().zip(x).map(|(&d, &v)| d * v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&d| d * *c).collect())],
            Op::MatMul(a, b, d) => {
                let (x, w) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); x.len()];
                let mut gb = vec![T::zero(); w.len()];
                if d.shared_rhs {
                    let rows = d.batch * d.m;
                    ops::matmul_nt_acc(g, w, &mut ga, rows, d.k, d.n);
                    ops::matmul_tn_acc(x, g, &mut gb, rows, d.k, d.n);
                } else {
                    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                    for bi in 0..d.batch {
                        let gc = &g[bi * sc..(bi + 1) * sc];
                        ops::matmul_nt_acc(gc, &w[bi * sb..(bi + 1) * sb], &mut ga[bi * sa..(bi + 1) * sa], d.m, d.k, d.n);
                        ops::matmul_tn_acc(&x[bi * sa..(bi + 1) * sa], gc, &mut gb[bi * sb..(bi + 1) * sb], d.m, d.k, d.n);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute(a, src) => {
                let mut ga = vec![T::zero(); g.len()];
                for (o, &s) in src.iter().enumerate() {
                    ga[s] = g[o];
                }
                vec![(*a, ga)]
            }
            Op::GatherRows(a, rows) => {
                let x = self.value(*a);
                let cols = x.numel() / x.shape()[0];
                let mut ga = vec![T::zero(); x.numel()];
                for (r, &src) in rows.iter().enumerate() {
                    let dst = &mut ga[src * cols..(src + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(acc, &v)| *acc = *acc + v);
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (xv, gv) = (self.value(*x).data(), self.value(*gamma).data());
                let n = gv.len();
                let nt = T::c(n as f64);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); n];
                let mut gbeta = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for r in 0..xv.len() / n {
                    let (row, dy) = (&xv[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..n {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = dy[j] * gv[j];
                        gg[j] = gg[j] + dy[j] * xhat[j];
                        gbeta[j] = gbeta[j] + dy[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / nt, s2 / nt);
                    for j in 0..n {
                        gx[r * n + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                vec![(*a, g.iter().zip(x).map(|(&d, &v)| d * ops::gelu_grad_scalar(v)).collect())]
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Softmax(a, axis) => {
                let y = out_value.data();
                let (outer, len, inner) = ops::axis_split(out_value.shape(), *axis)?;
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..len {
                            let idx = base + k * inner;
                            ga[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.shape()[0];
                let inv = T::c(1.0 / n as f64);
                let row: Vec<T> = g.iter().map(|&d| d * inv).collect();
                vec![(*a, row.repeat(n))]
            }
            Op::Dropout(a, mask) => vec![(*a, g.iter().zip(mask).map(|(&d, &m)| d * m).collect())],
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let classes = probs.len() / targets.len();
                let total_w: T = weights.iter().copied().sum();
                let mut gz = probs.clone();
                for (b, &t) in targets.iter().enumerate() {
                    gz[b * classes + t] = gz[b * classes + t] - T::one();
                    let f = g[0] * weights[b] / total_w;
                    gz[b * classes..(b + 1) * classes].iter_mut().for_each(|v| *v = *v * f);
                }
                vec![(*logits, gz)]
            }
            Op::Bce { logits, targets, weights } => {
                let z = self.value(*logits).data();
                let total_w: T = targets
                    .iter()
                    .zip(weights)
                    .filter(|(y, _)| y.is_some())
                    .map(|(_, &w)| w)
                    .sum();
                let gz = z
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&zi, yi), &w)| match yi {
                        Some(y) => g[0] * w / total_w * (ops::sigmoid_scalar(zi) - *y),
                        None => T::zero(),
                    })
                    .collect();
                vec![(*logits, gz)]
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grad = Tensor::from_parts(out_value.shape().to_vec(), g.to_vec());
                let gs = op.backward(&values, out_value, &grad)?;
                if gs.len() != inputs.len() {
                    return Err(Error::State(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&v, g)| g.map(|g| (v, g.into_data())))
                    .collect()
            }
        })
    }
}

fn resolve_weights<T: Scalar>(weights: Option<&[T]>, n: usize) -> Result<Vec<T>> {
    match weights {
        None => Ok(vec![T::one(); n]),
        Some(w) if w.len() != n => bail!(Dimension, "{} weights for {n} entries", w.len()),
        Some(w) if w.iter().any(|&v| v < T::zero() || !v.is_finite()) => {
            bail!(Parameter, "loss weights must be finite and non-negative")
        }
        Some(w) => Ok(w.to_vec()),
    }
}
