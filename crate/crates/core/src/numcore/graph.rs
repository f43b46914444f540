//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output tensor and whatever it
//! needs for the adjoint. `backward` walks the tape in exact reverse order and
//! leaves gradients in the `grad` slot of every node that requires one.
//!
//! Non-smooth operations (relu, abs, max-normalization, thresholding) and the
//! detached modulation statistics can be recorded and later replayed. A
//! finite-difference check replays the decisions of its base pass so that the
//! perturbed evaluations stay on the same smooth branch the analytic gradient
//! describes.

use super::ops::{self, ConvGeometry, PoolMode};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::modulation::{self, ActivationStats, ModulationFn};
use crate::network::{cam, loss};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Mul,
    Add,
    Sub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Abs,
}

/// A discrete choice made during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    /// Relu gate per element.
    Gate(Vec<bool>),
    /// Sign per element for abs.
    Sign(Vec<i8>),
    /// Per-sample statistics (and threshold masks) of a modulation.
    Modulation {
        stats: Vec<ActivationStats>,
        masks: Vec<Option<Vec<bool>>>,
    },
    /// Per-map decisions of a CAM max-normalization.
    CamNorm(Vec<cam::MapDecision>),
}

/// Ordered record of decisions taken by one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decisions(Vec<Decision>);

impl Decisions {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

enum Mode {
    Plain,
    Record(Vec<Decision>),
    Replay(std::vec::IntoIter<Decision>),
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    Downsample2 {
        input: Var,
    },
    Pool {
        input: Var,
        mode: PoolMode,
    },
    Linear {
        input: Var,
        weight: Var,
    },
    Binary {
        lhs: Var,
        rhs: Var,
        op: BinaryOp,
        lhs_map: Vec<usize>,
        rhs_map: Vec<usize>,
    },
    Relu {
        input: Var,
        gate: Vec<bool>,
    },
    Abs {
        input: Var,
        sign: Vec<i8>,
    },
    Sigmoid {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    ChannelConv {
        input: Var,
        kernel: Var,
    },
    Modulate {
        input: Var,
        f: ModulationFn,
        stats: Vec<ActivationStats>,
    },
    NormalizeCam {
        input: Var,
        maps: Vec<cam::MapDecision>,
    },
    SoftMargin {
        logits: Var,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Plain,
            consumed: false,
        }
    }

    /// A graph that records every non-smooth decision; see [`Graph::decisions`].
    pub fn recording() -> Self {
        Self {
            mode: Mode::Record(Vec::new()),
            ..Self::new()
        }
    }

    /// A graph that reuses decisions recorded by an earlier pass of the same
    /// computation instead of taking its own.
    pub fn replaying(decisions: Decisions) -> Self {
        Self {
            mode: Mode::Replay(decisions.0.into_iter()),
            ..Self::new()
        }
    }

    pub fn decisions(&self) -> Decisions {
        match &self.mode {
            Mode::Record(d) => Decisions(d.clone()),
            _ => Decisions::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives a gradient iff the tensor requires one.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("graph already consumed by backward".into()));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{name} produced {} at flat index {bad}",
                data[bad]
            )));
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push_unchecked(value, op))
    }

    fn next_decision(&mut self, what: &str) -> Result<Option<Decision>> {
        match &mut self.mode {
            Mode::Replay(it) => it
                .next()
                .map(Some)
                .ok_or_else(|| Error::State(format!("no recorded decision left for {what}"))),
            _ => Ok(None),
        }
    }

    fn record(&mut self, d: impl FnOnce() -> Decision) {
        if let Mode::Record(list) = &mut self.mode {
            list.push(d());
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = ops::conv2d_forward(&geometry, self.value(input).data(), self.value(kernel).data());
        self.push(
            "conv2d",
            geometry.output_shape(),
            out,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
        )
    }

    /// 2x2 stride-2 average pooling (ceil mode).
    pub fn downsample2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("downsample expects rank 4, got {shape:?}")));
        }
        let out = ops::downsample2_forward(&shape, self.value(input).data());
        self.push("downsample2", ops::downsample2_shape(&shape), out, &[input], Op::Downsample2 { input })
    }

    pub fn pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let out_shape = mode.output_shape(&shape)?;
        let out = ops::pool_forward(mode, &shape, self.value(input).data());
        self.push("pool", out_shape, out, &[input], Op::Pool { input, mode })
    }

    /// Bias-free `(B,C) x (N,C)^T -> (B,N)`.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        let (b, c, n) = (xs[0], xs[1], ws[0]);
        let out = ops::linear_forward(b, c, n, self.value(input).data(), self.value(weight).data());
        self.push("linear", vec![b, n], out, &[input, weight], Op::Linear { input, weight })
    }

    pub fn binary(&mut self, lhs: Var, rhs: Var, op: BinaryOp) -> Result<Var> {
        let out_shape = ops::broadcast_shape(self.shape(lhs), self.shape(rhs))?;
        let lhs_map = ops::broadcast_indices(&out_shape, self.shape(lhs));
        let rhs_map = ops::broadcast_indices(&out_shape, self.shape(rhs));
        let (a, b) = (self.value(lhs).data(), self.value(rhs).data());
        let out = lhs_map
            .iter()
            .zip(&rhs_map)
            .map(|(&i, &j)| match op {
                BinaryOp::Mul => a[i] * b[j],
                BinaryOp::Add => a[i] + b[j],
                BinaryOp::Sub => a[i] - b[j],
            })
            .collect();
        self.push(
            "elementwise",
            out_shape,
            out,
            &[lhs, rhs],
            Op::Binary {
                lhs,
                rhs,
                op,
                lhs_map,
                rhs_map,
            },
        )
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryOp::Mul)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryOp::Add)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryOp::Sub)
    }

    pub fn unary(&mut self, input: Var, op: UnaryOp) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let n = self.value(input).numel();
        match op {
            UnaryOp::Sigmoid => {
                let out = self.value(input).data().iter().map(|&v| sigmoid(v)).collect();
                self.push("sigmoid", shape, out, &[input], Op::Sigmoid { input })
            }
            UnaryOp::Relu => {
                let gate = match self.next_decision("relu")? {
                    Some(Decision::Gate(g)) if g.len() == n => g,
                    Some(_) => return Err(Error::State("decision mismatch at relu".into())),
                    None => self.value(input).data().iter().map(|&v| v > T::zero()).collect(),
                };
                let x = self.value(input).data();
                let out = x.iter().zip(&gate).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
                self.record(|| Decision::Gate(gate.clone()));
                self.push("relu", shape, out, &[input], Op::Relu { input, gate })
            }
            UnaryOp::Abs => {
                let sign = match self.next_decision("abs")? {
                    Some(Decision::Sign(s)) if s.len() == n => s,
                    Some(_) => return Err(Error::State("decision mismatch at abs".into())),
                    None => self
                        .value(input)
                        .data()
                        .iter()
                        .map(|&v| {
                            if v > T::zero() {
                                1
                            } else if v < T::zero() {
                                -1
                            } else {
                                0
                            }
                        })
                        .collect(),
                };
                let x = self.value(input).data();
                let out = x.iter().zip(&sign).map(|(&v, &s)| v * T::from_f64(s as f64)).collect();
                self.record(|| Decision::Sign(sign.clone()));
                self.push("abs", shape, out, &[input], Op::Abs { input, sign })
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, UnaryOp::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(input, UnaryOp::Sigmoid)
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        self.unary(input, UnaryOp::Abs)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let out = self.value(input).data().iter().map(|&v| v * factor).collect();
        self.push("scale", self.shape(input).to_vec(), out, &[input], Op::Scale { input, factor })
    }

    /// Sum of all elements into a one-element tensor (f64 accumulation).
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let acc: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        self.push("sum", vec![1], vec![T::from_f64(acc)], &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(input).numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(input)
            )));
        }
        let data = self.value(input).data().to_vec();
        self.push("reshape", shape, data, &[input], Op::Reshape { input })
    }

    /// Zero-padded 1-d convolution across channels. `input` is (B,C,...) with
    /// all trailing extents 1; `kernel` is a rank-1 tensor of odd length.
    pub fn channel_conv(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let ks = self.shape(kernel);
        if shape.len() < 2 || shape[2..].iter().any(|&d| d != 1) {
            return Err(Error::dim(format!("channel conv expects (B,C,1,..), got {shape:?}")));
        }
        if ks.len() != 1 || ks[0] % 2 == 0 {
            return Err(Error::dim(format!("channel conv kernel must be rank 1 and odd, got {ks:?}")));
        }
        if shape[1] < ks[0] {
            return Err(Error::dim(format!(
                "channel conv over {} channels with kernel {}",
                shape[1], ks[0]
            )));
        }
        let out = ops::channel_conv_forward(shape[0], shape[1], self.value(input).data(), self.value(kernel).data());
        self.push("channel_conv", shape, out, &[input, kernel], Op::ChannelConv { input, kernel })
    }

    /// Applies `f` independently to each sample (axis 0) as one activation map.
    pub fn modulate(&mut self, input: Var, f: &ModulationFn) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let batch = shape[0];
        let per = self.value(input).numel() / batch;
        let replay = match self.next_decision("modulate")? {
            Some(Decision::Modulation { stats, masks }) if stats.len() == batch => Some((stats, masks)),
            Some(_) => return Err(Error::State("decision mismatch at modulate".into())),
            None => None,
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len());
        let mut all_stats = Vec::with_capacity(batch);
        let mut all_masks = Vec::with_capacity(batch);
        for b in 0..batch {
            let map = &x[b * per..(b + 1) * per];
            let (st, mask) = match &replay {
                Some((s, m)) => (s[b], m[b].as_deref()),
                None => (modulation::slice_stats(map)?, None),
            };
            let (o, used) = modulation::modulate_map(map, f, &st, mask);
            out.extend(o);
            all_stats.push(st);
            all_masks.push(used);
        }
        let stats = all_stats.clone();
        self.record(|| Decision::Modulation {
            stats: all_stats,
            masks: all_masks,
        });
        self.push("modulate", shape, out, &[input], Op::Modulate { input, f: *f, stats })
    }

    /// Relu + per-map max normalization of a (B,N,H,W) CAM stack; maps of
    /// classes absent from `labels` (B,N) are zeroed.
    pub fn normalize_cam(&mut self, input: Var, labels: &[bool]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || labels.len() != shape[0] * shape[1] {
            return Err(Error::dim(format!(
                "normalize_cam: {shape:?} with {} labels",
                labels.len()
            )));
        }
        let replay = match self.next_decision("normalize_cam")? {
            Some(Decision::CamNorm(m)) if m.len() == labels.len() => Some(m),
            Some(_) => return Err(Error::State("decision mismatch at normalize_cam".into())),
            None => None,
        };
        let (out, maps) = cam::normalize_forward(self.value(input).data(), shape[2] * shape[3], labels, replay);
        self.record(|| Decision::CamNorm(maps.clone()));
        self.push("normalize_cam", shape, out, &[input], Op::NormalizeCam { input, maps })
    }

    /// Mean multi-label soft margin loss of (B,N) logits against multi-hot labels.
    pub fn soft_margin_loss(&mut self, logits: Var, labels: &[f32]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || labels.len() != shape[0] * shape[1] {
            return Err(Error::dim(format!(
                "soft margin loss: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let labels: Vec<T> = labels.iter().map(|&l| T::from_f64(l as f64)).collect();
        let value = loss::soft_margin_forward(self.value(logits).data(), &labels, shape[1]);
        self.push(
            "soft_margin_loss",
            vec![1],
            vec![value],
            &[logits],
            Op::SoftMargin { logits, labels },
        )
    }

    /// Reverse pass from a one-element `loss`. Gradients land in the `grad`
    /// slot of every node on a path from a leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward called twice without a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {idx} at flat index {bad}")));
            }
            self.propagate(idx, &g, &mut grads)?;
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: Var, contribution: Vec<T>) {
        if !self.requires_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                let (di, dk) = ops::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                );
                if let Some(di) = di {
                    self.accumulate(grads, *input, di);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
            }
            Op::Downsample2 { input } => {
                let d = ops::downsample2_backward(self.shape(*input), g);
                self.accumulate(grads, *input, d);
            }
            Op::Pool { input, mode } => {
                let d = ops::pool_backward(*mode, self.shape(*input), g);
                self.accumulate(grads, *input, d);
            }
            Op::Linear { input, weight } => {
                let (xs, ws) = (self.shape(*input), self.shape(*weight));
                let (di, dw) = ops::linear_backward(
                    xs[0],
                    xs[1],
                    ws[0],
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                );
                self.accumulate(grads, *input, di);
                self.accumulate(grads, *weight, dw);
            }
            Op::Binary {
                lhs,
                rhs,
                op,
                lhs_map,
                rhs_map,
            } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                let (ga, gb): (Vec<T>, Vec<T>) = match op {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    BinaryOp::Mul => (
                        g.iter().zip(rhs_map).map(|(&v, &j)| v * b[j]).collect(),
                        g.iter().zip(lhs_map).map(|(&v, &i)| v * a[i]).collect(),
                    ),
                };
                if self.requires_grad(*lhs) {
                    self.accumulate(grads, *lhs, ops::reduce_broadcast(&ga, lhs_map, a.len()));
                }
                if self.requires_grad(*rhs) {
                    self.accumulate(grads, *rhs, ops::reduce_broadcast(&gb, rhs_map, b.len()));
                }
            }
            Op::Relu { input, gate } => {
                let d = g
                    .iter()
                    .zip(gate)
                    .map(|(&v, &on)| if on { v } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, d);
            }
            Op::Abs { input, sign } => {
                let d = g.iter().zip(sign).map(|(&v, &s)| v * T::from_f64(s as f64)).collect();
                self.accumulate(grads, *input, d);
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&v, &s)| v * s * (T::one() - s)).collect();
                self.accumulate(grads, *input, d);
            }
            Op::Scale { input, factor } => {
                let d = g.iter().map(|&v| v * *factor).collect();
                self.accumulate(grads, *input, d);
            }
            Op::Sum { input } => {
                let d = vec![g[0]; self.value(*input).numel()];
                self.accumulate(grads, *input, d);
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g.to_vec());
            }
            Op::ChannelConv { input, kernel } => {
                let s = self.shape(*input);
                let (di, dk) = ops::channel_conv_backward(
                    s[0],
                    s[1],
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                );
                self.accumulate(grads, *input, di);
                self.accumulate(grads, *kernel, dk);
            }
            Op::Modulate { input, f, stats } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let per = x.len() / stats.len();
                let mut d = Vec::with_capacity(x.len());
                for (b, st) in stats.iter().enumerate() {
                    let r = b * per..(b + 1) * per;
                    d.extend(modulation::modulate_map_backward(
                        &x[r.clone()],
                        &y[r.clone()],
                        f,
                        st,
                        &g[r],
                    ));
                }
                self.accumulate(grads, *input, d);
            }
            Op::NormalizeCam { input, maps } => {
                let s = self.shape(*input);
                let d = cam::normalize_backward(self.value(*input).data(), s[2] * s[3], maps, g);
                self.accumulate(grads, *input, d);
            }
            Op::SoftMargin { logits, labels } => {
                let n = self.shape(*logits)[1];
                let d = loss::soft_margin_backward(self.value(*logits).data(), labels, n, g[0]);
                self.accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::from_f64(ops::sigmoid_f64(v.as_f64()))
}
