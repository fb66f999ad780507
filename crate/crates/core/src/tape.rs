//! Reverse-mode differentiation tape over dense tensors.
//!
//! A [`Tape`] records one forward pass as an append-only arena of nodes in
//! topological order; [`Tape::backward`] walks the arena once in reverse and
//! accumulates gradients additively into every node. A tape is single-use:
//! running backward a second time without a fresh forward is an error.
//!
//! Two escape hatches keep the op set small:
//! - [`Tape::custom_activation`] decouples a forward per-element map from the
//!   per-element gradient used in backward (the surrogate-gradient mechanism),
//!   optionally routing a second gradient to a declared-differentiable scalar
//!   auxiliary such as a surrogate steepness.
//! - [`Tape::scalar_fn`] records an arbitrary tensor-to-scalar function with a
//!   hand-written backward (used by the loss terms).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward/backward rules for a custom activation. Both maps receive the
/// pre-activation element and the auxiliary scalar (0.0 when none is wired).
pub struct ActivationRules {
    pub name: &'static str,
    pub forward: Box<dyn Fn(f64, f64) -> f64>,
    pub backward_input: Box<dyn Fn(f64, f64) -> f64>,
    /// Present only when the auxiliary receives gradients.
    pub backward_aux: Option<Box<dyn Fn(f64, f64) -> f64>>,
}

/// A tensor-to-scalar function with a custom gradient, recorded as one node.
pub trait ScalarFromTensor {
    fn name(&self) -> &'static str;
    fn forward(&self, x: &[f64]) -> f64;
    /// Accumulate `upstream * d(forward)/dx` into `dx`.
    fn backward(&self, x: &[f64], upstream: f64, dx: &mut [f64]);
}

/// Statistics source for threshold-scaled batch normalization.
pub enum TdbnStats {
    /// Use joint batch statistics (training mode).
    Batch,
    /// Use externally supplied running statistics (evaluation mode).
    Frozen { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel statistics the normalization actually used, echoed back so the
/// caller can maintain running estimates.
#[derive(Debug, Clone)]
pub struct TdbnUsedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScalarMul { a: NodeId, c: f64 },
    ScalarAdd { a: NodeId },
    ReduceSum { a: NodeId },
    ReduceMean { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Abs { a: NodeId },
    Sigmoid { a: NodeId },
    Softmax { a: NodeId, cols: usize },
    NarrowRows { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    TimeMean { a: NodeId, steps: usize },
    AvgPool2d { x: NodeId, k: usize },
    Flatten { x: NodeId },
    Custom { x: NodeId, aux: Option<NodeId>, rules: Rc<ActivationRules> },
    ScalarFn { x: NodeId, f: Rc<dyn ScalarFromTensor> },
    TdBn(Box<TdBnOp>),
    CfReset { u: NodeId, s: NodeId, theta_p: f64, theta_n: f64 },
}

struct TdBnOp {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    theta: f64,
    // cached from forward
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    frozen: bool,
}

struct Node {
    shape: Shape,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
            check_finite: false,
        }
    }

    /// Validate every op output for non-finite values as it is recorded.
    /// Off by default; the gradient checker turns it on.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape().clone(), t.into_values(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v), false)
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("node shape is consistent")
    }

    /// Accumulated gradient of a node; only meaningful after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Result<&[f64]> {
        if !self.spent {
            return Err(Error::Contract(
                "gradient requested before backward ran".into(),
            ));
        }
        Ok(&self.nodes[id.0].grad)
    }

    pub fn assert_finite(&self, id: NodeId, context: &str) -> Result<()> {
        match self.nodes[id.0].values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{context}: non-finite value at element {i}"
            ))),
        }
    }

    fn push(&mut self, shape: Shape, values: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.numel(), values.len());
        let n = values.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Shape, values: Vec<f64>, op: Op) -> Result<NodeId> {
        if self.spent {
            return Err(Error::Contract(
                "tape already consumed by backward; start a new forward pass".into(),
            ));
        }
        if self.check_finite {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "operation produced non-finite value at element {i}"
                )));
            }
        }
        Ok(self.push(shape, values, false, op))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{what}: operands have shapes {} and {}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ---- elementwise and linear algebra ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.rank() != 2 || sb.rank() != 2 || sa.dims()[1] != sb.dims()[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {sa} x {sb}"
            )));
        }
        let (m, k, n) = (sa.dims()[0], sa.dims()[1], sb.dims()[1]);
        let out = kernels::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        self.push_op(Shape::new(&[m, n])?, out, Op::Matmul { a, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.rank() != 4 || sw.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: need rank-4 input and kernel, got {sx} and {sw}"
            )));
        }
        let [b, cin, h, wd] = [sx.dims()[0], sx.dims()[1], sx.dims()[2], sx.dims()[3]];
        let [cout, kcin, kh, kw] = [sw.dims()[0], sw.dims()[1], sw.dims()[2], sw.dims()[3]];
        if cin != kcin {
            return Err(Error::Shape(format!(
                "conv2d: input channels {cin} != kernel channels {kcin}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{wd}"
            )));
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad);
        let ow = kernels::conv_out_extent(wd, kw, stride, pad);
        let out = kernels::conv2d(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            b,
            cin,
            h,
            wd,
            cout,
            kh,
            kw,
            stride,
            pad,
        );
        self.push_op(
            Shape::new(&[b, cout, oh, ow])?,
            out,
            Op::Conv2d { x, w, stride, pad },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x + y);
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::Add { a, b })
    }

    /// Broadcast a per-feature bias: `[n, f] + [f]` or `[b, c, h, w] + [c]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        let chans = bias_channels(sx)?;
        if sb.rank() != 1 || sb.dims()[0] != chans {
            return Err(Error::Shape(format!(
                "add_bias: input {sx} wants a [{chans}] bias, got {sb}"
            )));
        }
        let (outer, inner) = channel_strides(sx);
        let bv = &self.nodes[b.0].values;
        let mut out = self.nodes[x.0].values.clone();
        for o in 0..outer {
            for c in 0..chans {
                let base = (o * chans + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv[c];
                }
            }
        }
        self.push_op(sx.clone(), out, Op::AddBias { x, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x - y);
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x * y);
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::Mul { a, b })
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.nodes[a.0].values.iter().map(|&v| v * c).collect();
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::ScalarMul { a, c })
    }

    pub fn scalar_add(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.nodes[a.0].values.iter().map(|&v| v + c).collect();
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::ScalarAdd { a })
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push_op(Shape::new(&[1])?, vec![s], Op::ReduceSum { a })
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].values.len() as f64;
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push_op(Shape::new(&[1])?, vec![s / n], Op::ReduceMean { a })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a.0].values.iter().map(|v| v.exp()).collect();
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a.0].values.iter().map(|v| v.ln()).collect();
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::Log { a })
    }

    /// Elementwise absolute value; the subgradient at the kink is 0.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a.0].values.iter().map(|v| v.abs()).collect();
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::Abs { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a.0].values.iter().map(|&v| sigmoid(v)).collect();
        self.push_op(self.nodes[a.0].shape.clone(), out, Op::Sigmoid { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let cols = *shape.dims().last().expect("rank >= 1");
        let rows = shape.numel() / cols;
        let out = kernels::softmax_rows(&self.nodes[a.0].values, rows, cols);
        self.push_op(shape, out, Op::Softmax { a, cols })
    }

    /// Slice `len` leading-dimension rows starting at `start`.
    pub fn narrow_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = &self.nodes[a.0].shape;
        if start + len > shape.rows() {
            return Err(Error::Shape(format!(
                "narrow_rows: rows {start}..{} out of bounds for {shape}",
                start + len
            )));
        }
        let rs = shape.row_size();
        let mut dims = shape.dims().to_vec();
        dims[0] = len;
        let out = self.nodes[a.0].values[start * rs..(start + len) * rs].to_vec();
        self.push_op(Shape::new(&dims)?, out, Op::NarrowRows { a, start })
    }

    /// Concatenate along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no operands".into()));
        }
        let rs = self.nodes[parts[0].0].shape.row_size();
        let mut dims = self.nodes[parts[0].0].shape.dims().to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.row_size() != rs || s.dims()[1..] != dims[1..] {
                return Err(Error::Shape(format!(
                    "concat_rows: incompatible part shape {s} vs {:?}",
                    dims
                )));
            }
            rows += s.rows();
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        dims[0] = rows;
        self.push_op(Shape::new(&dims)?, out, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Mean over the time axis of a step-major `[steps*batch, ...]` tensor.
    pub fn time_mean(&mut self, a: NodeId, steps: usize) -> Result<NodeId> {
        let shape = &self.nodes[a.0].shape;
        if steps == 0 || !shape.rows().is_multiple_of(steps) {
            return Err(Error::Shape(format!(
                "time_mean: {} rows do not split into {steps} steps",
                shape.rows()
            )));
        }
        let batch = shape.rows() / steps;
        let rs = shape.row_size();
        let mut dims = shape.dims().to_vec();
        dims[0] = batch;
        let mut out = vec![0.0; batch * rs];
        let inv = 1.0 / steps as f64;
        for t in 0..steps {
            for b in 0..batch {
                let src = &self.nodes[a.0].values[(t * batch + b) * rs..][..rs];
                let dst = &mut out[b * rs..(b + 1) * rs];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * inv;
                }
            }
        }
        self.push_op(Shape::new(&dims)?, out, Op::TimeMean { a, steps })
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = &self.nodes[x.0].shape;
        if s.rank() != 4 {
            return Err(Error::Shape(format!("avg_pool2d: need rank-4 input, got {s}")));
        }
        let [b, c, h, w] = [s.dims()[0], s.dims()[1], s.dims()[2], s.dims()[3]];
        if k == 0 || h < k || w < k {
            return Err(Error::Shape(format!(
                "avg_pool2d: window {k} does not fit {h}x{w}"
            )));
        }
        let oh = kernels::conv_out_extent(h, k, k, 0);
        let ow = kernels::conv_out_extent(w, k, k, 0);
        let out = kernels::avg_pool2d(&self.nodes[x.0].values, b, c, h, w, k);
        self.push_op(Shape::new(&[b, c, oh, ow])?, out, Op::AvgPool2d { x, k })
    }

    /// Collapse all trailing dimensions: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = &self.nodes[x.0].shape;
        if s.rank() < 2 {
            return Err(Error::Shape(format!("flatten: need rank >= 2, got {s}")));
        }
        let dims = [s.rows(), s.row_size()];
        let out = self.nodes[x.0].values.clone();
        self.push_op(Shape::new(&dims)?, out, Op::Flatten { x })
    }

    // ---- custom-gradient ops ----

    /// Forward per-element map with an independent backward rule. When `aux`
    /// is given it must be a one-element node; its value is passed to every
    /// rule call and it receives `sum(upstream * backward_aux)` on backward.
    pub fn custom_activation(
        &mut self,
        x: NodeId,
        aux: Option<NodeId>,
        rules: Rc<ActivationRules>,
    ) -> Result<NodeId> {
        let aux_val = match aux {
            Some(a) => {
                if self.nodes[a.0].values.len() != 1 {
                    return Err(Error::Shape(format!(
                        "custom_activation '{}': auxiliary must be scalar, got {}",
                        rules.name, self.nodes[a.0].shape
                    )));
                }
                self.nodes[a.0].values[0]
            }
            None => 0.0,
        };
        let mut out = Vec::with_capacity(self.nodes[x.0].values.len());
        for (i, &u) in self.nodes[x.0].values.iter().enumerate() {
            let v = (rules.forward)(u, aux_val);
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "custom_activation '{}': forward rule produced non-finite value at element {i}",
                    rules.name
                )));
            }
            out.push(v);
        }
        self.push_op(
            self.nodes[x.0].shape.clone(),
            out,
            Op::Custom { x, aux, rules },
        )
    }

    /// Record a tensor-to-scalar function with a hand-written gradient.
    pub fn scalar_fn(&mut self, x: NodeId, f: Rc<dyn ScalarFromTensor>) -> Result<NodeId> {
        let v = f.forward(&self.nodes[x.0].values);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "scalar function '{}' produced non-finite value",
                f.name()
            )));
        }
        self.push_op(Shape::new(&[1])?, vec![v], Op::ScalarFn { x, f })
    }

    /// Threshold-scaled batch normalization: `theta * gamma * (x - m) /
    /// sqrt(v + eps) + beta` with per-channel statistics taken jointly over
    /// every non-channel axis. Returns the statistics that were used.
    pub fn tdbn(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        theta: f64,
        eps: f64,
        stats: TdbnStats,
    ) -> Result<(NodeId, TdbnUsedStats)> {
        let sx = self.nodes[x.0].shape.clone();
        let chans = bias_channels(&sx)?;
        let (outer, inner) = channel_strides(&sx);
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            let s = &self.nodes[p.0].shape;
            if s.rank() != 1 || s.dims()[0] != chans {
                return Err(Error::Shape(format!(
                    "tdbn: {name} must be [{chans}] for input {sx}, got {s}"
                )));
            }
        }
        let per_channel = outer * inner;
        let (mean, var, frozen) = match stats {
            TdbnStats::Batch => {
                if per_channel < 2 {
                    return Err(Error::Numeric(
                        "tdbn: variance is undefined over a single element per channel; \
                         increase the batch x time-step product"
                            .into(),
                    ));
                }
                let xv = &self.nodes[x.0].values;
                let mut mean = vec![0.0; chans];
                let mut var = vec![0.0; chans];
                for c in 0..chans {
                    let mut sum = 0.0;
                    for o in 0..outer {
                        let base = (o * chans + c) * inner;
                        for &v in &xv[base..base + inner] {
                            sum += v;
                        }
                    }
                    mean[c] = sum / per_channel as f64;
                    let mut sq = 0.0;
                    for o in 0..outer {
                        let base = (o * chans + c) * inner;
                        for &v in &xv[base..base + inner] {
                            let d = v - mean[c];
                            sq += d * d;
                        }
                    }
                    var[c] = sq / per_channel as f64;
                    if !mean[c].is_finite() || !var[c].is_finite() {
                        return Err(Error::Numeric(format!(
                            "tdbn: non-finite statistics on channel {c} \
                             (mean {}, var {})",
                            mean[c], var[c]
                        )));
                    }
                }
                (mean, var, false)
            }
            TdbnStats::Frozen { mean, var } => {
                if mean.len() != chans || var.len() != chans {
                    return Err(Error::Shape(format!(
                        "tdbn: frozen stats have {} channels, input has {chans}",
                        mean.len()
                    )));
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.nodes[gamma.0].values.clone();
        let bv = self.nodes[beta.0].values.clone();
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for c in 0..chans {
                let base = (o * chans + c) * inner;
                let scale = theta * gv[c] * inv_std[c];
                for i in base..base + inner {
                    out[i] = scale * (xv[i] - mean[c]) + bv[c];
                }
            }
        }
        let used = TdbnUsedStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let id = self.push_op(
            sx,
            out,
            Op::TdBn(Box::new(TdBnOp {
                x,
                gamma,
                beta,
                theta,
                mean,
                inv_std,
                frozen,
            })),
        )?;
        Ok((id, used))
    }

    /// Signed soft reset of a circulate-firing layer: positive spikes remove
    /// `theta_p` each, negative spikes give back `|theta_n|` each, zero-spike
    /// elements pass through.
    pub fn cf_reset(&mut self, u: NodeId, s: NodeId, theta_p: f64, theta_n: f64) -> Result<NodeId> {
        self.same_shape(u, s, "cf_reset")?;
        let out = zip_map(&self.nodes[u.0].values, &self.nodes[s.0].values, |uv, sv| {
            uv - sv.max(0.0) * theta_p + (-sv).max(0.0) * (-theta_n)
        });
        self.push_op(
            self.nodes[u.0].shape.clone(),
            out,
            Op::CfReset { u, s, theta_p, theta_n },
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape's single backward
    /// budget; every reachable node accumulates its gradient additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.spent {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass first".into(),
            ));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                self.nodes[loss.0].shape
            )));
        }
        self.spent = true;
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            self.backward_node(i);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) {
        // Operands always precede their output, so split keeps borrows disjoint.
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        // every backward rule is linear in the upstream gradient, so a node
        // nothing flowed into contributes nothing
        if node.grad.iter().all(|&g| g == 0.0) {
            return;
        }
        let go = &node.grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (before[a.0].shape.dims()[0], before[a.0].shape.dims()[1]);
                let n = before[b.0].shape.dims()[1];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                kernels::matmul_backward(
                    &before[a.0].values,
                    &before[b.0].values,
                    go,
                    m,
                    k,
                    n,
                    &mut da,
                    &mut db,
                );
                accumulate(&mut before[a.0].grad, &da);
                accumulate(&mut before[b.0].grad, &db);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = before[x.0].shape.dims();
                let sw = before[w.0].shape.dims();
                let mut dx = vec![0.0; before[x.0].values.len()];
                let mut dw = vec![0.0; before[w.0].values.len()];
                kernels::conv2d_backward(
                    &before[x.0].values,
                    &before[w.0].values,
                    go,
                    sx[0],
                    sx[1],
                    sx[2],
                    sx[3],
                    sw[0],
                    sw[2],
                    sw[3],
                    *stride,
                    *pad,
                    &mut dx,
                    &mut dw,
                );
                accumulate(&mut before[x.0].grad, &dx);
                accumulate(&mut before[w.0].grad, &dw);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let go = go.clone();
                accumulate(&mut before[a.0].grad, &go);
                accumulate(&mut before[b.0].grad, &go);
            }
            Op::AddBias { x, b } => {
                let sx = &before[x.0].shape;
                let chans = bias_channels(sx).expect("validated at forward");
                let (outer, inner) = channel_strides(sx);
                let mut db = vec![0.0; chans];
                for o in 0..outer {
                    for c in 0..chans {
                        let base = (o * chans + c) * inner;
                        for &g in &go[base..base + inner] {
                            db[c] += g;
                        }
                    }
                }
                let go = go.clone();
                accumulate(&mut before[x.0].grad, &go);
                accumulate(&mut before[b.0].grad, &db);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let go = go.clone();
                accumulate(&mut before[a.0].grad, &go);
                for (g, u) in before[b.0].grad.iter_mut().zip(&go) {
                    *g -= u;
                }
            }
            Op::Mul { a, b } => {
                let da = zip_map(go, &before[b.0].values, |g, v| g * v);
                let db = zip_map(go, &before[a.0].values, |g, v| g * v);
                accumulate(&mut before[a.0].grad, &da);
                accumulate(&mut before[b.0].grad, &db);
            }
            Op::ScalarMul { a, c } => {
                let da: Vec<f64> = go.iter().map(|&g| g * c).collect();
                accumulate(&mut before[a.0].grad, &da);
            }
            Op::ScalarAdd { a } => {
                let go = go.clone();
                accumulate(&mut before[a.0].grad, &go);
            }
            Op::ReduceSum { a } => {
                let g = go[0];
                for d in before[a.0].grad.iter_mut() {
                    *d += g;
                }
            }
            Op::ReduceMean { a } => {
                let g = go[0] / before[a.0].values.len() as f64;
                for d in before[a.0].grad.iter_mut() {
                    *d += g;
                }
            }
            Op::Exp { a } => {
                let da = zip_map(go, &node.values, |g, y| g * y);
                accumulate(&mut before[a.0].grad, &da);
            }
            Op::Log { a } => {
                let da = zip_map(go, &before[a.0].values, |g, x| g / x);
                accumulate(&mut before[a.0].grad, &da);
            }
            Op::Abs { a } => {
                // subgradient 0 at the kink
                let da = zip_map(go, &before[a.0].values, |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(&mut before[a.0].grad, &da);
            }
            Op::Sigmoid { a } => {
                let da = zip_map(go, &node.values, |g, y| g * y * (1.0 - y));
                accumulate(&mut before[a.0].grad, &da);
            }
            Op::Softmax { a, cols } => {
                let cols = *cols;
                let rows = node.values.len() / cols;
                let mut da = vec![0.0; node.values.len()];
                for r in 0..rows {
                    let p = &node.values[r * cols..(r + 1) * cols];
                    let g = &go[r * cols..(r + 1) * cols];
                    let dot: f64 = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
                    for j in 0..cols {
                        da[r * cols + j] = p[j] * (g[j] - dot);
                    }
                }
                accumulate(&mut before[a.0].grad, &da);
            }
            Op::NarrowRows { a, start } => {
                let rs = before[a.0].shape.row_size();
                let offset = start * rs;
                for (j, &g) in go.iter().enumerate() {
                    before[a.0].grad[offset + j] += g;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = before[p.0].values.len();
                    for (d, &g) in before[p.0].grad.iter_mut().zip(&go[offset..offset + n]) {
                        *d += g;
                    }
                    offset += n;
                }
            }
            Op::TimeMean { a, steps } => {
                let steps = *steps;
                let rs = before[a.0].shape.row_size();
                let batch = before[a.0].shape.rows() / steps;
                let inv = 1.0 / steps as f64;
                for t in 0..steps {
                    for b in 0..batch {
                        let dst = &mut before[a.0].grad[(t * batch + b) * rs..][..rs];
                        let src = &go[b * rs..(b + 1) * rs];
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d += g * inv;
                        }
                    }
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = before[x.0].shape.dims();
                let mut dx = vec![0.0; before[x.0].values.len()];
                kernels::avg_pool2d_backward(go, s[0], s[1], s[2], s[3], *k, &mut dx);
                accumulate(&mut before[x.0].grad, &dx);
            }
            Op::Flatten { x } => {
                let go = go.clone();
                accumulate(&mut before[x.0].grad, &go);
            }
            Op::Custom { x, aux, rules } => {
                let aux_val = aux.map(|a| before[a.0].values[0]).unwrap_or(0.0);
                let xv = &before[x.0].values;
                let dx: Vec<f64> = go
                    .iter()
                    .zip(xv)
                    .map(|(&g, &u)| g * (rules.backward_input)(u, aux_val))
                    .collect();
                let daux = match (&rules.backward_aux, aux) {
                    (Some(rule), Some(_)) => {
                        Some(go.iter().zip(xv).map(|(&g, &u)| g * rule(u, aux_val)).sum::<f64>())
                    }
                    _ => None,
                };
                accumulate(&mut before[x.0].grad, &dx);
                if let (Some(da), Some(a)) = (daux, aux) {
                    before[a.0].grad[0] += da;
                }
            }
            Op::ScalarFn { x, f } => {
                let mut dx = vec![0.0; before[x.0].values.len()];
                f.backward(&before[x.0].values, go[0], &mut dx);
                accumulate(&mut before[x.0].grad, &dx);
            }
            Op::TdBn(op) => {
                let sx = &before[op.x.0].shape;
                let chans = bias_channels(sx).expect("validated at forward");
                let (outer, inner) = channel_strides(sx);
                let per_channel = (outer * inner) as f64;
                let xv = &before[op.x.0].values;
                let gv = &before[op.gamma.0].values;
                let mut d_gamma = vec![0.0; chans];
                let mut d_beta = vec![0.0; chans];
                let mut dx = vec![0.0; xv.len()];
                for c in 0..chans {
                    let (m, istd) = (op.mean[c], op.inv_std[c]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for o in 0..outer {
                        let base = (o * chans + c) * inner;
                        for i in base..base + inner {
                            let xhat = (xv[i] - m) * istd;
                            sum_g += go[i];
                            sum_gx += go[i] * xhat;
                        }
                    }
                    d_beta[c] = sum_g;
                    d_gamma[c] = op.theta * sum_gx;
                    let scale = op.theta * gv[c] * istd;
                    if op.frozen {
                        for o in 0..outer {
                            let base = (o * chans + c) * inner;
                            for i in base..base + inner {
                                dx[i] = scale * go[i];
                            }
                        }
                    } else {
                        let mean_g = sum_g / per_channel;
                        let mean_gx = sum_gx / per_channel;
                        for o in 0..outer {
                            let base = (o * chans + c) * inner;
                            for i in base..base + inner {
                                let xhat = (xv[i] - m) * istd;
                                dx[i] = scale * (go[i] - mean_g - xhat * mean_gx);
                            }
                        }
                    }
                }
                accumulate(&mut before[op.x.0].grad, &dx);
                accumulate(&mut before[op.gamma.0].grad, &d_gamma);
                accumulate(&mut before[op.beta.0].grad, &d_beta);
            }
            Op::CfReset { u, s, theta_p, theta_n } => {
                let (tp, tn) = (*theta_p, *theta_n);
                let du = go.clone();
                let ds = zip_map(go, &before[s.0].values, |g, sv| {
                    if sv > 0.0 {
                        -g * tp
                    } else if sv < 0.0 {
                        g * tn
                    } else {
                        0.0
                    }
                });
                accumulate(&mut before[u.0].grad, &du);
                accumulate(&mut before[s.0].grad, &ds);
            }
        }
    }

    /// Leaves flagged `requires_grad`, for debugging and reporting.
    pub fn grad_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Channel count convention shared by add_bias and tdbn: dim 1 for rank >= 2,
/// a single channel for rank 1.
fn bias_channels(s: &Shape) -> Result<usize> {
    Ok(if s.rank() >= 2 { s.dims()[1] } else { 1 })
}

/// (outer, inner) extents around the channel axis.
fn channel_strides(s: &Shape) -> (usize, usize) {
    if s.rank() >= 2 {
        let inner: usize = s.dims()[2..].iter().product();
        (s.dims()[0], inner)
    } else {
        (s.dims()[0], 1)
    }
}
