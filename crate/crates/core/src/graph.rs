//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output. [`Graph::backward`]
//! walks the tape in reverse. Besides values, each node records the block
//! scope it was created in, its multiply-accumulate count and (optionally)
//! its wall time, which is what the cost reports aggregate.
//!
//! A graph created with [`Graph::meta`] propagates shapes only: no values
//! are computed, but MAC counts and scopes are recorded exactly as in a real
//! forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom, NormStats};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers; running averages updated.
    Train,
    /// Running statistics; the forward pass is a pure function.
    Eval,
}

/// Kind of an intermediate recorded for later inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Sigmoid output of a channel re-weighting branch, `[n, c, 1, 1]`.
    ChannelGate,
    /// Sigmoid output of a spatial attention branch, `[n, 1, h, w]`.
    SpatialGate,
    Feature,
}

#[derive(Clone, Debug)]
pub struct Record {
    pub name: String,
    pub kind: RecordKind,
    pub var: Var,
    /// Channel that carries the IMU mask in the gated input, if any.
    pub imu_channel: Option<usize>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ChannelAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    /// `a * b` where `b` is either `a`'s shape or broadcast along h,w or c.
    Mul(Var, Var),
    Scale(Var, f64),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelMax(Var, Vec<u32>),
    Concat(Vec<Var>),
    AvgPool(Var, usize),
    MaxPool(Var, Vec<u32>),
    Bilinear(Var),
    Softmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Norm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::ChannelMean(_) => "channel_mean",
            Op::ChannelMax(..) => "channel_max",
            Op::Concat(_) => "concat",
            Op::AvgPool(..) => "avg_pool",
            Op::MaxPool(..) => "max_pool",
            Op::Bilinear(_) => "bilinear",
            Op::Softmax(_) => "softmax",
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    scope: usize,
    macs: u64,
    elapsed: Duration,
    requires_grad: bool,
}

/// Per-operation cost record.
#[derive(Clone, Debug)]
pub struct OpStat<'a> {
    pub scope: &'a str,
    pub op: &'static str,
    pub macs: u64,
    pub elapsed: Duration,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    meta: bool,
    timing: bool,
    scopes: Vec<String>,
    stack: Vec<usize>,
    records: Vec<Record>,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            meta: false,
            timing: false,
            scopes: vec![String::new()],
            stack: vec![0],
            records: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// Shape-propagating graph for cost analysis.
    pub fn meta(mode: Mode) -> Self {
        Self {
            meta: true,
            ..Self::new(mode)
        }
    }

    /// Enables per-operation wall-time measurement.
    pub fn with_timing(mut self, on: bool) -> Self {
        self.timing = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn is_meta(&self) -> bool {
        self.meta
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Running-statistic updates produced by a training-mode pass.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn op_stats(&self) -> impl Iterator<Item = OpStat<'_>> {
        self.nodes.iter().map(|n| OpStat {
            scope: &self.scopes[n.scope],
            op: n.op.name(),
            macs: n.macs,
            elapsed: n.elapsed,
        })
    }

    /// Total MACs attributed to `scope` and its sub-scopes.
    pub fn macs_under(&self, scope: &str) -> u64 {
        self.op_stats()
            .filter(|s| crate::params::under(s.scope, scope))
            .map(|s| s.macs)
            .sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    pub fn current_scope(&self) -> &str {
        &self.scopes[*self.stack.last().expect("scope stack never empty")]
    }

    /// Runs `f` inside the named sub-scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let parent = self.current_scope();
        let path = if parent.is_empty() {
            name.to_string()
        } else {
            format!("{parent}.{name}")
        };
        let idx = match self.scopes.iter().position(|s| *s == path) {
            Some(i) => i,
            None => {
                self.scopes.push(path);
                self.scopes.len() - 1
            }
        };
        self.stack.push(idx);
        let out = f(self);
        self.stack.pop();
        out
    }

    pub fn record(&mut self, name: &str, kind: RecordKind, var: Var, imu_channel: Option<usize>) {
        let scope = self.current_scope();
        let name = if scope.is_empty() {
            name.to_string()
        } else {
            format!("{scope}.{name}")
        };
        self.records.push(Record {
            name,
            kind,
            var,
            imu_channel,
        });
    }

    fn push(&mut self, op: Op, value: Tensor, macs: u64, elapsed: Duration) -> Var {
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            scope: *self.stack.last().expect("scope stack never empty"),
            macs,
            elapsed,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Computes an output unless the graph is shape-only.
    fn eval(&self, shape: Shape, f: impl FnOnce() -> Tensor) -> (Tensor, Duration) {
        if self.meta {
            return (Tensor::meta(shape), Duration::ZERO);
        }
        let start = self.timing.then(Instant::now);
        let t = f();
        debug_assert_eq!(t.shape(), shape);
        (t, start.map_or(Duration::ZERO, |s| s.elapsed()))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ChannelAffine { x, w, b } => vec![*x, *w, *b],
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::GlobalAvgPool(x)
            | Op::ChannelMean(x)
            | Op::ChannelMax(x, _)
            | Op::AvgPool(x, _)
            | Op::MaxPool(x, _)
            | Op::Bilinear(x)
            | Op::Softmax(x) => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
        }
    }

    // ----- leaves -------------------------------------------------------

    pub fn input(&mut self, t: Tensor) -> Var {
        let t = if self.meta { Tensor::meta(t.shape()) } else { t };
        self.push(Op::Input, t, 0, Duration::ZERO)
    }

    /// Input leaf whose gradient is tracked (see [`Gradients::input`]).
    pub fn input_grad(&mut self, t: Tensor) -> Var {
        let v = self.input(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Constant with the given shape (zero-filled unless meta).
    pub fn input_shape(&mut self, shape: Shape) -> Var {
        let t = if self.meta { Tensor::meta(shape) } else { Tensor::zeros(shape) };
        self.push(Op::Input, t, 0, Duration::ZERO)
    }

    pub fn param(&mut self, ps: &ParamStore, id: ParamId) -> Var {
        let value = ps.value(id);
        let node = Node {
            op: Op::Param(id),
            value,
            scope: *self.stack.last().expect("scope stack never empty"),
            macs: 0,
            elapsed: Duration::ZERO,
            requires_grad: true,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    // ----- operations ---------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != geom.kh || ws.w != geom.kw {
            return Err(shape_err!("conv weight {ws} does not fit input {xs} with {geom:?}"));
        }
        if let Some(b) = b {
            if self.shape(b).numel() != ws.n {
                return Err(shape_err!("conv bias of {} values for {} filters", self.shape(b).numel(), ws.n));
            }
        }
        let out = kernels::conv2d_shape(xs, ws.n, &geom)
            .ok_or_else(|| shape_err!("kernel {geom:?} larger than padded input {xs}"))?;
        let macs = (out.numel() * ws.c * ws.h * ws.w) as u64;
        let (t, dt) = self.eval(out, || {
            let bias = b.map(|b| self.value(b).data());
            kernels::conv2d(self.value(x), self.value(w), bias, &geom)
        });
        Ok(self.push(Op::Conv { x, w, b, geom }, t, macs, dt))
    }

    /// Per-channel scale and shift (depthwise 1×1 convolution).
    pub fn channel_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        if self.shape(w).numel() != s.c || self.shape(b).numel() != s.c {
            return Err(shape_err!("channel affine parameters do not match {s}"));
        }
        let (t, dt) = self.eval(s, || {
            kernels::channel_affine(self.value(x), self.value(w).data(), self.value(b).data())
        });
        Ok(self.push(Op::ChannelAffine { x, w, b }, t, s.numel() as u64, dt))
    }

    /// Batch normalisation. In training mode batch statistics are used and
    /// running-average updates are queued; in evaluation mode the running
    /// buffers are read from `ps`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        ps: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        if ps.entry(gamma).shape.numel() != s.c {
            return Err(shape_err!("batch norm over {} channels applied to {s}", ps.entry(gamma).shape.numel()));
        }
        let g = self.param(ps, gamma);
        let b = self.param(ps, beta);
        let batch_stats = self.is_train();
        let stats = if self.meta {
            NormStats {
                mean: vec![],
                inv_std: vec![],
                var_unbiased: vec![],
            }
        } else if batch_stats {
            let st = kernels::batch_stats(self.value(x), eps);
            let upd = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter().zip(new).map(|(o, n)| (1.0 - momentum) * o + momentum * n).collect()
            };
            self.buffer_updates.push((running_mean, upd(ps.value(running_mean).data(), &st.mean)));
            self.buffer_updates.push((running_var, upd(ps.value(running_var).data(), &st.var_unbiased)));
            st
        } else {
            let rv = ps.value(running_var);
            NormStats {
                mean: ps.value(running_mean).data().to_vec(),
                inv_std: rv.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                var_unbiased: vec![],
            }
        };
        let (t, dt) = self.eval(s, || {
            kernels::normalize(
                self.value(x),
                &stats.mean,
                &stats.inv_std,
                self.value(g).data(),
                self.value(b).data(),
            )
        });
        Ok(self.push(
            Op::Norm {
                x,
                gamma: g,
                beta: b,
                mean: stats.mean,
                inv_std: stats.inv_std,
                batch_stats,
            },
            t,
            0,
            dt,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (t, dt) = self.eval(s, || self.value(x).map(|v| v.max(0.0)));
        self.push(Op::Relu(x), t, 0, dt)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (t, dt) = self.eval(s, || self.value(x).map(sigmoid));
        self.push(Op::Sigmoid(x), t, 0, dt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if self.shape(b) != s {
            return Err(shape_err!("add of {s} and {}", self.shape(b)));
        }
        let (t, dt) = self.eval(s, || {
            let mut t = self.value(a).clone();
            t.add_assign(self.value(b));
            t
        });
        Ok(self.push(Op::Add(a, b), t, 0, dt))
    }

    /// Sum of several same-shaped tensors.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| shape_err!("sum of no tensors"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Elementwise product with `b` broadcast over `a`: `b` is `a`'s shape,
    /// `[n, c, 1, 1]` (channel gate) or `[n, 1, h, w]` (spatial gate).
    /// Every product counts as one MAC.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sb == sa || sb == sa.with_hw(1, 1) || sb == sa.with_c(1);
        if !ok {
            return Err(shape_err!("cannot broadcast {sb} over {sa}"));
        }
        let (t, dt) = self.eval(sa, || broadcast_mul(self.value(a), self.value(b)));
        Ok(self.push(Op::Mul(a, b), t, sa.numel() as u64, dt))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let s = self.shape(x);
        let (t, dt) = self.eval(s, || self.value(x).map(|v| v * k));
        self.push(Op::Scale(x, k), t, 0, dt)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).with_hw(1, 1);
        let (t, dt) = self.eval(s, || kernels::global_avg_pool(self.value(x)));
        self.push(Op::GlobalAvgPool(x), t, 0, dt)
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x).with_c(1);
        let (t, dt) = self.eval(s, || kernels::channel_mean(self.value(x)));
        self.push(Op::ChannelMean(x), t, 0, dt)
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let s = self.shape(x).with_c(1);
        let mut arg = Vec::new();
        let (t, dt) = self.eval(s, || {
            let (t, a) = kernels::channel_max(self.value(x));
            arg = a;
            t
        });
        self.push(Op::ChannelMax(x, arg), t, 0, dt)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err!("concat of no tensors"))?);
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(shape_err!("concat of {s} with {first}: spatial or batch mismatch"));
            }
            c += s.c;
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let out = first.with_c(c);
        let (t, dt) = self.eval(out, || {
            let mut data = Vec::with_capacity(out.numel());
            for n in 0..out.n {
                for &x in xs {
                    data.extend_from_slice(self.value(x).sample(n));
                }
            }
            Tensor::from_parts(out, data)
        });
        Ok(self.push(Op::Concat(xs.to_vec()), t, 0, dt))
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if k == 0 || !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
            return Err(shape_err!("average pool {k}×{k} does not tile {s}"));
        }
        if k == 1 {
            return Ok(x);
        }
        let out = s.with_hw(s.h / k, s.w / k);
        let (t, dt) = self.eval(out, || kernels::avg_pool(self.value(x), k));
        Ok(self.push(Op::AvgPool(x, k), t, 0, dt))
    }

    /// 3×3, stride-2, pad-1 max pooling (ResNet stem).
    pub fn max_pool_3s2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let (oh, ow) = ConvGeom::new(3, 2, 1, 1)
            .out_hw(s.h, s.w)
            .ok_or_else(|| shape_err!("max pool window larger than {s}"))?;
        let mut arg = Vec::new();
        let (t, dt) = self.eval(s.with_hw(oh, ow), || {
            let (t, a) = kernels::max_pool(self.value(x), 3, 2, 1);
            arg = a;
            t
        });
        Ok(self.push(Op::MaxPool(x, arg), t, 0, dt))
    }

    /// Bilinear resize (half-pixel centres).
    pub fn bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        if (s.h, s.w) == (h, w) {
            return x;
        }
        let (t, dt) = self.eval(s.with_hw(h, w), || kernels::bilinear(self.value(x), h, w));
        self.push(Op::Bilinear(x), t, 0, dt)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (t, dt) = self.eval(s, || kernels::softmax_channels(self.value(x)));
        self.push(Op::Softmax(x), t, 0, dt)
    }

    // ----- differentiation ---------------------------------------------

    /// Back-propagates the given output gradients. Gradients of parameter
    /// leaves that appear several times are summed.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        assert!(!self.meta, "backward on a shape-only graph");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(shape_err!("seed gradient {} for output {}", g.shape(), self.shape(*v)));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(dy);
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| -> &Tensor { &self.nodes[v.0].value };
            match &node.op {
                Op::Input => grads[i] = Some(dy),
                Op::Param(id) => match params.get_mut(id) {
                    Some(acc) => acc.add_assign(&dy),
                    None => {
                        params.insert(*id, dy.clone());
                    }
                },
                Op::Conv { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(val(x), val(w), &dy, geom, needs(x));
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[w.0], cg.dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], Tensor::from_parts(val(b).shape(), cg.db));
                    }
                }
                Op::ChannelAffine { x, w, b } => {
                    let s = val(x).shape();
                    let wv = val(w).data();
                    let mut dw = vec![0.0; s.c];
                    let mut db = vec![0.0; s.c];
                    let mut dx = dy.clone();
                    for (p, (gp, xp)) in dy.data().chunks(s.hw()).zip(val(x).data().chunks(s.hw())).enumerate() {
                        let c = p % s.c;
                        dw[c] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                        db[c] += gp.iter().sum::<f64>();
                    }
                    for (p, plane) in dx.data_mut().chunks_mut(s.hw()).enumerate() {
                        let k = wv[p % s.c];
                        plane.iter_mut().for_each(|g| *g *= k);
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], Tensor::from_parts(val(w).shape(), dw));
                    accumulate(&mut grads[b.0], Tensor::from_parts(val(b).shape(), db));
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let ng = kernels::normalize_backward(val(x), &dy, mean, inv_std, val(gamma).data(), *batch_stats);
                    accumulate(&mut grads[x.0], ng.dx);
                    accumulate(&mut grads[gamma.0], Tensor::from_parts(val(gamma).shape(), ng.dgamma));
                    accumulate(&mut grads[beta.0], Tensor::from_parts(val(beta).shape(), ng.dbeta));
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(val(x).data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads[b.0], dy.clone());
                    }
                    accumulate(&mut grads[a.0], dy);
                }
                Op::Mul(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads[b.0], broadcast_mul_reduce(&dy, val(a), val(b).shape()));
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], broadcast_mul(&dy, val(b)));
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads[x.0], dy.map(|g| g * k));
                }
                Op::GlobalAvgPool(x) => {
                    let s = val(x).shape();
                    let inv = 1.0 / s.hw() as f64;
                    let data = dy
                        .data()
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g * inv, s.hw()))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(s, data));
                }
                Op::ChannelMean(x) => {
                    let s = val(x).shape();
                    let inv = 1.0 / s.c as f64;
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n {
                        let g = &dy.data()[n * s.hw()..(n + 1) * s.hw()];
                        for c in 0..s.c {
                            let o = (n * s.c + c) * s.hw();
                            dx.data_mut()[o..o + s.hw()]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(d, g)| *d = g * inv);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ChannelMax(x, arg) => {
                    let s = val(x).shape();
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for p in 0..s.hw() {
                            let c = arg[n * s.hw() + p] as usize;
                            dx.data_mut()[(n * s.c + c) * s.hw() + p] = dy.data()[n * s.hw() + p];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat(xs) => {
                    let out = node.value.shape();
                    let mut c0 = 0;
                    for x in xs {
                        let s = val(x).shape();
                        if needs(x) {
                            let mut data = Vec::with_capacity(s.numel());
                            for n in 0..out.n {
                                let off = n * out.chw() + c0 * out.hw();
                                data.extend_from_slice(&dy.data()[off..off + s.chw()]);
                            }
                            accumulate(&mut grads[x.0], Tensor::from_parts(s, data));
                        }
                        c0 += s.c;
                    }
                }
                Op::AvgPool(x, k) => {
                    accumulate(&mut grads[x.0], kernels::avg_pool_backward(&dy, *k, val(x).shape()));
                }
                Op::MaxPool(x, arg) => {
                    accumulate(&mut grads[x.0], kernels::max_pool_backward(&dy, arg, val(x).shape()));
                }
                Op::Bilinear(x) => {
                    accumulate(&mut grads[x.0], kernels::bilinear_backward(&dy, val(x).shape()));
                }
                Op::Softmax(x) => {
                    accumulate(&mut grads[x.0], kernels::softmax_channels_backward(&node.value, &dy));
                }
            }
        }
        Ok(Gradients { params, nodes: grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn broadcast_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let sa = a.shape();
    let sb = b.shape();
    let mut out = a.clone();
    if sb == sa {
        out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
    } else if sb == sa.with_hw(1, 1) {
        for (p, plane) in out.data_mut().chunks_mut(sa.hw()).enumerate() {
            let g = b.data()[p];
            plane.iter_mut().for_each(|x| *x *= g);
        }
    } else {
        for (p, plane) in out.data_mut().chunks_mut(sa.hw()).enumerate() {
            let n = p / sa.c;
            let g = &b.data()[n * sa.hw()..(n + 1) * sa.hw()];
            plane.iter_mut().zip(g).for_each(|(x, y)| *x *= y);
        }
    }
    out
}

/// Gradient of `a * b` with respect to a broadcast `b`.
fn broadcast_mul_reduce(dy: &Tensor, a: &Tensor, sb: Shape) -> Tensor {
    let sa = a.shape();
    if sb == sa {
        let data = dy.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
        return Tensor::from_parts(sb, data);
    }
    let mut out = Tensor::zeros(sb);
    let planes = dy.data().chunks(sa.hw()).zip(a.data().chunks(sa.hw()));
    if sb == sa.with_hw(1, 1) {
        for (p, (g, x)) in planes.enumerate() {
            out.data_mut()[p] = g.iter().zip(x).map(|(g, x)| g * x).sum();
        }
    } else {
        for (p, (g, x)) in planes.enumerate() {
            let n = p / sa.c;
            let dst = &mut out.data_mut()[n * sa.hw()..(n + 1) * sa.hw()];
            for ((d, g), x) in dst.iter_mut().zip(g).zip(x) {
                *d += g * x;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient reaching an input leaf.
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}
