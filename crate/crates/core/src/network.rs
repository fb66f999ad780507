//! Network assembly and the T-step unrolled forward pass.
//!
//! Layers operate on step-major tensors of shape `[steps * batch, ...]`:
//! stateless layers (linear, conv, normalization, pooling) transform the
//! whole unrolled block at once, which gives the normalization its joint
//! time-and-batch statistics for free; spiking layers split the block into
//! per-step chunks and carry membrane state across them. The readout
//! averages the last spike train over time and maps neurons to classes
//! through a fixed voting matrix.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::neuron::{cf_fire_scalar, lif_fire_scalar, NeuronConfig, NeuronKind, ResetMode, SpikeRecord};
use crate::rng::SplitMix64;
use crate::surrogate::{
    cf_single_level_grad, cf_single_level_grad_dalpha, cf_total_grad, cf_total_grad_dalpha,
    plg_integral, plg_integral_dalpha, sg_cf_rect, sg_plg, sg_plg_dalpha, sg_rectangular,
    smoothed_forward, smoothed_forward_dalpha, CfComposition, SurrogateFamily, SurrogateSpec,
};
use crate::tape::{ActivationRules, NodeId, Tape, TdbnStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { out: usize },
    Conv2d { out: usize, kernel: usize, stride: usize, pad: usize },
    TdBn,
    Spike,
    /// Two 3x3-style convolutions with an additive skip, then normalization.
    /// Must be followed by a Spike layer.
    Residual { channels: usize, kernel: usize, stride: usize, pad: usize },
    Pool { k: usize },
    Flatten,
    Vote { classes: usize },
}

impl LayerSpec {
    /// Parse one descriptor token, e.g. `conv:8,3,2,1`, `linear:40`,
    /// `res:16,3,1,1`, `pool:2`, `tdbn`, `spike`, `flatten`, `vote:10`.
    pub fn parse(token: &str) -> Result<Self> {
        let (head, args) = match token.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (token, None),
        };
        let ints = |a: Option<&str>, n: usize| -> Result<Vec<usize>> {
            let a = a.ok_or_else(|| Error::Config(format!("layer '{head}' needs arguments")))?;
            let parts: Vec<&str> = a.split(',').collect();
            if parts.len() != n {
                return Err(Error::Config(format!(
                    "layer '{head}' takes {n} arguments, got '{a}'"
                )));
            }
            parts
                .iter()
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad integer '{p}' in layer '{token}'")))
                })
                .collect()
        };
        match head {
            "linear" => Ok(LayerSpec::Linear { out: ints(args, 1)?[0] }),
            "conv" => {
                let v = ints(args, 4)?;
                Ok(LayerSpec::Conv2d { out: v[0], kernel: v[1], stride: v[2], pad: v[3] })
            }
            "res" => {
                let v = ints(args, 4)?;
                Ok(LayerSpec::Residual { channels: v[0], kernel: v[1], stride: v[2], pad: v[3] })
            }
            "pool" => Ok(LayerSpec::Pool { k: ints(args, 1)?[0] }),
            "tdbn" => Ok(LayerSpec::TdBn),
            "spike" => Ok(LayerSpec::Spike),
            "flatten" => Ok(LayerSpec::Flatten),
            "vote" => Ok(LayerSpec::Vote { classes: ints(args, 1)?[0] }),
            other => Err(Error::Config(format!("unknown layer kind '{other}'"))),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            LayerSpec::Linear { out } => format!("linear:{out}"),
            LayerSpec::Conv2d { out, kernel, stride, pad } => {
                format!("conv:{out},{kernel},{stride},{pad}")
            }
            LayerSpec::TdBn => "tdbn".into(),
            LayerSpec::Spike => "spike".into(),
            LayerSpec::Residual { channels, kernel, stride, pad } => {
                format!("res:{channels},{kernel},{stride},{pad}")
            }
            LayerSpec::Pool { k } => format!("pool:{k}"),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Vote { classes } => format!("vote:{classes}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub neuron: NeuronConfig,
    pub surrogate: SurrogateSpec,
    /// Simulation steps T.
    pub steps: usize,
    /// Per-sample feature dims, e.g. `[2]` or `[1, 28, 28]`.
    pub input_dims: Vec<usize>,
    /// Normalization target scale for tdBN layers (the firing threshold).
    pub bn_theta: f64,
    pub bn_eps: f64,
    /// TSG reparameterization: alpha = tsg_scale * sigmoid(x) + tsg_bias.
    pub tsg_scale: f64,
    pub tsg_bias: f64,
}

impl NetworkSpec {
    pub fn parse_arch(arch: &str) -> Result<Vec<LayerSpec>> {
        let layers: Result<Vec<LayerSpec>> =
            arch.split_whitespace().map(LayerSpec::parse).collect();
        let layers = layers?;
        if layers.is_empty() {
            return Err(Error::Config("network arch is empty".into()));
        }
        Ok(layers)
    }

    pub fn arch_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.descriptor())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        self.surrogate.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps T must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let votes = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Vote { .. }))
            .count();
        if votes != 1 || !matches!(self.layers.last(), Some(LayerSpec::Vote { .. })) {
            return Err(Error::Config(
                "exactly one vote layer must terminate the network".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            #[allow(clippy::collapsible_match)]
            match layer {
                LayerSpec::Spike => {
                    let ok = i > 0
                        && matches!(
                            self.layers[i - 1],
                            LayerSpec::TdBn
                                | LayerSpec::Linear { .. }
                                | LayerSpec::Conv2d { .. }
                                | LayerSpec::Residual { .. }
                        );
                    if !ok {
                        return Err(Error::Config(format!(
                            "spike layer {i} must follow a normalization or affine layer"
                        )));
                    }
                }
                LayerSpec::Residual { .. } => {
                    if !matches!(self.layers.get(i + 1), Some(LayerSpec::Spike)) {
                        return Err(Error::Config(format!(
                            "residual block {i} must feed a spike layer"
                        )));
                    }
                }
                LayerSpec::Vote { .. } => {
                    if i == 0 || !matches!(self.layers[i - 1], LayerSpec::Spike) {
                        return Err(Error::Config(
                            "vote layer must follow a spike layer".into(),
                        ));
                    }
                }
                _ => {}
            }
        }
        match (self.neuron.kind, self.surrogate.family) {
            (NeuronKind::Lif, SurrogateFamily::CfRectangular) => {
                return Err(Error::Config(
                    "surrogate family cf_rectangular needs circulate-firing neurons".into(),
                ))
            }
            (NeuronKind::Cf, SurrogateFamily::Rectangular) => {
                return Err(Error::Config(
                    "surrogate family rectangular is single-threshold; use cf_rectangular \
                     for circulate-firing neurons"
                        .into(),
                ))
            }
            _ => {}
        }
        self.infer_shapes().map(|_| ())
    }

    /// Per-layer output dims (per sample, batch axis excluded).
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_dims.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Linear { out } => {
                    if cur.len() != 1 {
                        return Err(Error::Config(format!(
                            "layer {i}: linear needs a flat [features] input, got {cur:?}"
                        )));
                    }
                    vec![*out]
                }
                LayerSpec::Conv2d { out, kernel, stride, pad } => {
                    conv_shape(&cur, *out, *kernel, *stride, *pad, i)?
                }
                LayerSpec::Residual { channels, kernel, stride, pad } => {
                    conv_shape(&cur, *channels, *kernel, *stride, *pad, i)?
                }
                LayerSpec::TdBn | LayerSpec::Spike => cur,
                LayerSpec::Pool { k } => {
                    if cur.len() != 3 || cur[1] < *k || cur[2] < *k {
                        return Err(Error::Config(format!(
                            "layer {i}: pool:{k} does not fit input {cur:?}"
                        )));
                    }
                    vec![cur[0], cur[1] / k, cur[2] / k]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Vote { classes } => {
                    if cur.len() != 1 {
                        return Err(Error::Config(format!(
                            "layer {i}: vote needs a flat [neurons] input, got {cur:?}"
                        )));
                    }
                    if cur[0] != *classes && !cur[0].is_multiple_of(*classes) {
                        return Err(Error::Config(format!(
                            "layer {i}: {} voting neurons not divisible by {} classes",
                            cur[0], classes
                        )));
                    }
                    vec![*classes]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }
}

fn conv_shape(cur: &[usize], out: usize, k: usize, stride: usize, pad: usize, i: usize) -> Result<Vec<usize>> {
    if cur.len() != 3 {
        return Err(Error::Config(format!(
            "layer {i}: conv needs a [channels, h, w] input, got {cur:?}"
        )));
    }
    if stride == 0 || cur[1] + 2 * pad < k || cur[2] + 2 * pad < k {
        return Err(Error::Config(format!(
            "layer {i}: kernel {k} stride {stride} pad {pad} does not fit {cur:?}"
        )));
    }
    let oh = (cur[1] + 2 * pad - k) / stride + 1;
    let ow = (cur[2] + 2 * pad - k) / stride + 1;
    Ok(vec![out, oh, ow])
}

/// A learnable tensor with its optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub momentum: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let zeros = Tensor::zeros(tensor.dims()).expect("same dims");
        Parameter {
            name: name.into(),
            momentum: zeros.clone(),
            grad: zeros,
            tensor,
        }
    }
}

/// Running normalization statistics for one tdBN site.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BnState {
    fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Debug, Clone)]
struct ConvPlan {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    name: String,
}

#[derive(Debug, Clone)]
struct BnPlan {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Debug, Clone)]
enum LayerPlan {
    Linear { w: usize, b: usize, name: String },
    Conv(ConvPlan),
    TdBn(BnPlan),
    Spike { ordinal: usize, name: String },
    Residual {
        conv1: ConvPlan,
        bn1: BnPlan,
        spike_ordinal: usize,
        spike_name: String,
        conv2: ConvPlan,
        skip: Option<ConvPlan>,
        bn2: BnPlan,
    },
    Pool { k: usize },
    Flatten,
    Vote { map: Tensor },
}

/// How the unrolled forward behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch normalization statistics, running estimates updated, spiking
    /// activations.
    Train,
    /// Frozen running statistics, spiking activations, steepness frozen.
    Eval,
    /// Batch statistics without running updates, firing replaced by its
    /// smoothed antiderivative: the classically differentiable oracle path.
    Smoothed,
}

/// Pre-firing membrane node of one spiking layer at one step.
#[derive(Debug, Clone)]
pub struct MembraneNode {
    pub ordinal: usize,
    pub layer: String,
    pub step: usize,
    pub node: NodeId,
}

#[derive(Debug)]
pub struct UnrollOutput {
    /// Class scores `[batch, classes]`.
    pub scores: NodeId,
    pub membranes: Vec<MembraneNode>,
    pub record: SpikeRecord,
}

/// Per-layer MAC counts with the names used by the spike record.
#[derive(Debug, Clone)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Parameter>,
    pub bn_states: Vec<BnState>,
    plans: Vec<LayerPlan>,
    shapes: Vec<Vec<usize>>,
    spike_sites: usize,
    /// Index into `params` of the TSG steepness grid, when learnable.
    tsg_param: Option<usize>,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.infer_shapes()?;
        let mut rng = SplitMix64::new(seed).split_labeled("init");
        let mut params: Vec<Parameter> = Vec::new();
        let mut bn_states: Vec<BnState> = Vec::new();
        let mut plans = Vec::with_capacity(spec.layers.len());
        let mut ordinal = 0usize;

        let add_conv = |params: &mut Vec<Parameter>,
                            rng: &mut SplitMix64,
                            name: String,
                            cin: usize,
                            cout: usize,
                            k: usize,
                            stride: usize,
                            pad: usize|
         -> Result<ConvPlan> {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let w = Tensor::randn(&[cout, cin, k, k], std, rng)?;
            params.push(Parameter::new(format!("{name}.weight"), w));
            let wi = params.len() - 1;
            params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])?));
            Ok(ConvPlan { w: wi, b: params.len() - 1, stride, pad, name })
        };
        let add_bn = |params: &mut Vec<Parameter>,
                      bn_states: &mut Vec<BnState>,
                      name: String,
                      channels: usize|
         -> Result<BnPlan> {
            params.push(Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)?));
            let gamma = params.len() - 1;
            params.push(Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])?));
            bn_states.push(BnState::new(channels));
            Ok(BnPlan { gamma, beta: params.len() - 1, state: bn_states.len() - 1 })
        };

        let mut cur = spec.input_dims.clone();
        for (i, layer) in spec.layers.iter().enumerate() {
            let plan = match layer {
                LayerSpec::Linear { out } => {
                    let inp = cur[0];
                    let std = (2.0 / inp as f64).sqrt();
                    let w = Tensor::randn(&[inp, *out], std, &mut rng)?;
                    params.push(Parameter::new(format!("l{i}.linear.weight"), w));
                    let wi = params.len() - 1;
                    params.push(Parameter::new(
                        format!("l{i}.linear.bias"),
                        Tensor::zeros(&[*out])?,
                    ));
                    LayerPlan::Linear { w: wi, b: params.len() - 1, name: format!("l{i}.linear") }
                }
                LayerSpec::Conv2d { out, kernel, stride, pad } => LayerPlan::Conv(add_conv(
                    &mut params,
                    &mut rng,
                    format!("l{i}.conv"),
                    cur[0],
                    *out,
                    *kernel,
                    *stride,
                    *pad,
                )?),
                LayerSpec::TdBn => {
                    let channels = cur[0];
                    LayerPlan::TdBn(add_bn(&mut params, &mut bn_states, format!("l{i}.bn"), channels)?)
                }
                LayerSpec::Spike => {
                    let plan = LayerPlan::Spike { ordinal, name: format!("l{i}.spike") };
                    ordinal += 1;
                    plan
                }
                LayerSpec::Residual { channels, kernel, stride, pad } => {
                    let cin = cur[0];
                    let conv1 = add_conv(
                        &mut params,
                        &mut rng,
                        format!("l{i}.res.conv1"),
                        cin,
                        *channels,
                        *kernel,
                        *stride,
                        *pad,
                    )?;
                    let bn1 = add_bn(&mut params, &mut bn_states, format!("l{i}.res.bn1"), *channels)?;
                    let spike_ordinal = ordinal;
                    ordinal += 1;
                    let conv2 = add_conv(
                        &mut params,
                        &mut rng,
                        format!("l{i}.res.conv2"),
                        *channels,
                        *channels,
                        *kernel,
                        1,
                        *pad,
                    )?;
                    let skip = if cin != *channels || *stride != 1 {
                        Some(add_conv(
                            &mut params,
                            &mut rng,
                            format!("l{i}.res.skip"),
                            cin,
                            *channels,
                            1,
                            *stride,
                            0,
                        )?)
                    } else {
                        None
                    };
                    let bn2 = add_bn(&mut params, &mut bn_states, format!("l{i}.res.bn2"), *channels)?;
                    LayerPlan::Residual {
                        conv1,
                        bn1,
                        spike_ordinal,
                        spike_name: format!("l{i}.res.spike"),
                        conv2,
                        skip,
                        bn2,
                    }
                }
                LayerSpec::Pool { k } => LayerPlan::Pool { k: *k },
                LayerSpec::Flatten => LayerPlan::Flatten,
                LayerSpec::Vote { classes } => {
                    LayerPlan::Vote { map: voting_map(cur[0], *classes)? }
                }
            };
            plans.push(plan);
            cur = shapes[i].clone();
        }

        let tsg_param = if spec.surrogate.family == SurrogateFamily::Tsg {
            params.push(Parameter::new(
                "tsg.x",
                Tensor::zeros(&[spec.steps * ordinal.max(1)])?,
            ));
            Some(params.len() - 1)
        } else {
            None
        };

        Ok(Network {
            spec,
            params,
            bn_states,
            plans,
            shapes,
            spike_sites: ordinal,
            tsg_param,
        })
    }

    pub fn spike_sites(&self) -> usize {
        self.spike_sites
    }

    pub fn tsg_param_index(&self) -> Option<usize> {
        self.tsg_param
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn output_classes(&self) -> usize {
        match self.spec.layers.last() {
            Some(LayerSpec::Vote { classes }) => *classes,
            _ => unreachable!("validated: vote terminates the network"),
        }
    }

    /// Current steepness alpha(t, ordinal) as the forward pass will use it.
    pub fn alpha_value(&self, t: usize, ordinal: usize) -> Result<f64> {
        match self.tsg_param {
            Some(pi) => {
                let idx = self.tsg_index(t, ordinal)?;
                let x = self.params[pi].tensor.values()[idx];
                Ok(self.spec.tsg_scale * crate::surrogate::sigmoid(x) + self.spec.tsg_bias)
            }
            None => Ok(self.spec.surrogate.alpha),
        }
    }

    fn tsg_index(&self, t: usize, ordinal: usize) -> Result<usize> {
        if t >= self.spec.steps || ordinal >= self.spike_sites {
            return Err(Error::Contract(format!(
                "tsg index (t={t}, l={ordinal}) outside {}x{}",
                self.spec.steps, self.spike_sites
            )));
        }
        Ok(t * self.spike_sites + ordinal)
    }

    /// Per-synaptic-layer MAC counts per sample per step; pooling, reshapes,
    /// normalization, and the fixed voting map cost zero.
    pub fn layer_flops(&self) -> Vec<LayerFlops> {
        let mut out = Vec::new();
        let mut cur = self.spec.input_dims.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear { out: o } => out.push(LayerFlops {
                    name: format!("l{i}.linear"),
                    flops: (cur[0] * o) as u64,
                }),
                LayerSpec::Conv2d { out: o, kernel, stride, pad } => {
                    let sh = conv_shape(&cur, *o, *kernel, *stride, *pad, i).expect("validated");
                    out.push(LayerFlops {
                        name: format!("l{i}.conv"),
                        flops: (o * cur[0] * kernel * kernel * sh[1] * sh[2]) as u64,
                    });
                }
                LayerSpec::Residual { channels, kernel, stride, pad } => {
                    let sh = conv_shape(&cur, *channels, *kernel, *stride, *pad, i).expect("validated");
                    let (oh, ow) = (sh[1], sh[2]);
                    out.push(LayerFlops {
                        name: format!("l{i}.res.conv1"),
                        flops: (channels * cur[0] * kernel * kernel * oh * ow) as u64,
                    });
                    out.push(LayerFlops {
                        name: format!("l{i}.res.conv2"),
                        flops: (channels * channels * kernel * kernel * oh * ow) as u64,
                    });
                    if cur[0] != *channels || *stride != 1 {
                        out.push(LayerFlops {
                            name: format!("l{i}.res.skip"),
                            flops: (channels * cur[0] * oh * ow) as u64,
                        });
                    }
                }
                _ => {}
            }
            cur = self.shapes[i].clone();
        }
        out
    }

    /// Stage every parameter onto a tape as gradient-bearing leaves, in
    /// declaration order.
    pub fn stage_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), true))
            .collect()
    }

    /// Run the unrolled forward pass over a step-major input block of shape
    /// `[steps * batch, features...]`. `input_is_spikes` marks whether the
    /// encoded train counts as spikes for the firing-rate record.
    pub fn forward_unroll(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        batch: usize,
        mode: ForwardMode,
        staged: &[NodeId],
        input_is_spikes: bool,
    ) -> Result<UnrollOutput> {
        let steps = self.spec.steps;
        if steps == 0 {
            return Err(Error::Config("steps T must be >= 1".into()));
        }
        if input.dims()[0] != steps * batch {
            return Err(Error::Shape(format!(
                "forward_unroll: input has {} rows, want steps*batch = {}",
                input.dims()[0],
                steps * batch
            )));
        }
        let plans = self.plans.clone();
        let mut walk = Walk {
            net: self,
            tape,
            staged,
            batch,
            mode,
            record: SpikeRecord::new(),
            membranes: Vec::new(),
            carrying_spikes: input_is_spikes,
        };
        let mut x = walk.tape.constant(input.clone());
        let mut scores = None;
        for plan in &plans {
            x = walk.apply(plan, x)?;
            if matches!(plan, LayerPlan::Vote { .. }) {
                scores = Some(x);
            }
        }
        Ok(UnrollOutput {
            scores: scores.expect("validated: vote terminates the network"),
            membranes: walk.membranes,
            record: walk.record,
        })
    }
}

/// Fixed neuron-to-class map: identity when the width matches the class
/// count, otherwise an equal-population map whose rows average the block of
/// neurons assigned to each class (so a silent block scores 0 and a
/// unit-rate block scores 1).
fn voting_map(neurons: usize, classes: usize) -> Result<Tensor> {
    if neurons == classes {
        let mut m = Tensor::zeros(&[neurons, classes])?;
        for i in 0..classes {
            m.values_mut()[i * classes + i] = 1.0;
        }
        return Ok(m);
    }
    if !neurons.is_multiple_of(classes) {
        return Err(Error::Config(format!(
            "{neurons} voting neurons not divisible by {classes} classes"
        )));
    }
    let per = neurons / classes;
    let mut m = Tensor::zeros(&[neurons, classes])?;
    for n in 0..neurons {
        m.values_mut()[n * classes + n / per] = 1.0 / per as f64;
    }
    Ok(m)
}

struct Walk<'a> {
    net: &'a mut Network,
    tape: &'a mut Tape,
    staged: &'a [NodeId],
    batch: usize,
    mode: ForwardMode,
    record: SpikeRecord,
    membranes: Vec<MembraneNode>,
    carrying_spikes: bool,
}

impl Walk<'_> {
    fn steps(&self) -> usize {
        self.net.spec.steps
    }

    fn observe_input(&mut self, name: &str, x: NodeId) {
        let rs = self.tape.shape(x).row_size() * self.batch;
        let analog = !self.carrying_spikes;
        for t in 0..self.steps() {
            let values = &self.tape.values(x)[t * rs..(t + 1) * rs];
            self.record.observe(name, t, values, analog);
        }
    }

    fn apply(&mut self, plan: &LayerPlan, x: NodeId) -> Result<NodeId> {
        match plan {
            LayerPlan::Linear { w, b, name } => {
                self.observe_input(name, x);
                let y = self.tape.matmul(x, self.staged[*w])?;
                self.carrying_spikes = false;
                self.tape.add_bias(y, self.staged[*b])
            }
            LayerPlan::Conv(c) => {
                self.observe_input(&c.name, x);
                let y = self.apply_conv(c, x)?;
                self.carrying_spikes = false;
                Ok(y)
            }
            LayerPlan::TdBn(bn) => {
                let y = self.apply_bn(bn, x)?;
                self.carrying_spikes = false;
                Ok(y)
            }
            LayerPlan::Spike { ordinal, name } => self.apply_spike(x, *ordinal, name),
            LayerPlan::Pool { k } => self.tape.avg_pool2d(x, *k),
            LayerPlan::Flatten => self.tape.flatten(x),
            LayerPlan::Vote { map } => {
                let mean = self.tape.time_mean(x, self.steps())?;
                let m = self.tape.constant(map.clone());
                self.carrying_spikes = false;
                self.tape.matmul(mean, m)
            }
            LayerPlan::Residual {
                conv1,
                bn1,
                spike_ordinal,
                spike_name,
                conv2,
                skip,
                bn2,
            } => {
                self.observe_input(&conv1.name, x);
                let mut main = self.apply_conv(conv1, x)?;
                self.carrying_spikes = false;
                main = self.apply_bn(bn1, main)?;
                main = self.apply_spike(main, *spike_ordinal, spike_name)?;
                self.observe_input(&conv2.name, main);
                main = self.apply_conv(conv2, main)?;
                self.carrying_spikes = false;
                let shortcut = match skip {
                    Some(sc) => {
                        self.apply_conv(sc, x)?
                    }
                    None => x,
                };
                let sum = self.tape.add(main, shortcut)?;
                self.apply_bn(bn2, sum)
            }
        }
    }

    fn apply_conv(&mut self, c: &ConvPlan, x: NodeId) -> Result<NodeId> {
        let y = self.tape.conv2d(x, self.staged[c.w], c.stride, c.pad)?;
        self.tape.add_bias(y, self.staged[c.b])
    }

    fn apply_bn(&mut self, bn: &BnPlan, x: NodeId) -> Result<NodeId> {
        let spec = &self.net.spec;
        let stats = match self.mode {
            ForwardMode::Train | ForwardMode::Smoothed => TdbnStats::Batch,
            ForwardMode::Eval => TdbnStats::Frozen {
                mean: self.net.bn_states[bn.state].running_mean.clone(),
                var: self.net.bn_states[bn.state].running_var.clone(),
            },
        };
        let (y, used) = self.tape.tdbn(
            x,
            self.staged[bn.gamma],
            self.staged[bn.beta],
            spec.bn_theta,
            spec.bn_eps,
            stats,
        )?;
        if self.mode == ForwardMode::Train {
            self.net.bn_states[bn.state].update(&used.mean, &used.var);
        }
        Ok(y)
    }

    /// Temporal loop of one spiking site: split the step-major block, carry
    /// membrane state, fire through the configured surrogate, reset, and
    /// stitch the spike train back together.
    fn apply_spike(&mut self, x: NodeId, ordinal: usize, name: &str) -> Result<NodeId> {
        let steps = self.steps();
        let batch = self.batch;
        let cfg = self.net.spec.neuron;
        let mut v_prev: Option<NodeId> = None;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let i_t = self.tape.narrow_rows(x, t * batch, batch)?;
            let u_t = match v_prev {
                None => i_t,
                Some(v) => {
                    let decayed = self.tape.scalar_mul(v, cfg.k_tau)?;
                    self.tape.add(decayed, i_t)?
                }
            };
            let aux = self.stage_alpha(t, ordinal)?;
            let rules = build_rules(&cfg, &self.net.spec.surrogate, self.mode, aux.is_some())?;
            let s_t = self.tape.custom_activation(u_t, aux, rules)?;
            let v_t = self.apply_reset(u_t, s_t, &cfg)?;
            self.record.observe(name, t, self.tape.values(s_t), false);
            self.membranes.push(MembraneNode {
                ordinal,
                layer: name.to_string(),
                step: t,
                node: u_t,
            });
            outs.push(s_t);
            v_prev = Some(v_t);
        }
        self.carrying_spikes = true;
        self.tape.concat_rows(&outs)
    }

    /// Build the tape nodes for alpha(t, l) = scale * sigmoid(x[t,l]) + bias
    /// off the staged TSG grid, so x receives gradients through the chain.
    fn stage_alpha(&mut self, t: usize, ordinal: usize) -> Result<Option<NodeId>> {
        let Some(pi) = self.net.tsg_param else {
            return Ok(None);
        };
        let idx = self.net.tsg_index(t, ordinal)?;
        let x = self.tape.narrow_rows(self.staged[pi], idx, 1)?;
        let sig = self.tape.sigmoid(x)?;
        let scaled = self.tape.scalar_mul(sig, self.net.spec.tsg_scale)?;
        Ok(Some(self.tape.scalar_add(scaled, self.net.spec.tsg_bias)?))
    }

    fn apply_reset(&mut self, u: NodeId, s: NodeId, cfg: &NeuronConfig) -> Result<NodeId> {
        match cfg.kind {
            NeuronKind::Cf => self.tape.cf_reset(u, s, cfg.theta_p, cfg.theta_n),
            NeuronKind::Lif => match cfg.reset_mode {
                ResetMode::Soft => {
                    let scaled = self.tape.scalar_mul(s, cfg.theta_p)?;
                    self.tape.sub(u, scaled)
                }
                ResetMode::Hard => {
                    let neg = self.tape.scalar_mul(s, -1.0)?;
                    let keep = self.tape.scalar_add(neg, 1.0)?;
                    let v = self.tape.mul(u, keep)?;
                    if cfg.u_reset != 0.0 {
                        let reset_term = self.tape.scalar_mul(s, cfg.u_reset)?;
                        self.tape.add(v, reset_term)
                    } else {
                        Ok(v)
                    }
                }
            },
        }
    }
}

/// Assemble the forward/backward rule pair for one spiking site.
fn build_rules(
    cfg: &NeuronConfig,
    surrogate: &SurrogateSpec,
    mode: ForwardMode,
    learnable: bool,
) -> Result<Rc<ActivationRules>> {
    let cfg = *cfg;
    let alpha_fixed = surrogate.alpha;
    // When no auxiliary node is wired, rules read the fixed alpha instead of
    // the aux argument.
    let pick = move |aux: f64| if learnable { aux } else { alpha_fixed };

    let smoothed = mode == ForwardMode::Smoothed;
    if smoothed
        && !matches!(surrogate.family, SurrogateFamily::Plg | SurrogateFamily::Tsg)
    {
        return Err(Error::Config(
            "the smoothed gradient oracle needs a triangular surrogate family (plg or tsg)".into(),
        ));
    }

    let rules = match (cfg.kind, surrogate.family) {
        (NeuronKind::Lif, SurrogateFamily::Rectangular) => ActivationRules {
            name: "lif_rectangular",
            forward: Box::new(move |u, _| lif_fire_scalar(u, cfg.theta_p)),
            backward_input: Box::new(move |u, _| sg_rectangular(u, cfg.theta_p, alpha_fixed)),
            backward_aux: None,
        },
        (NeuronKind::Lif, SurrogateFamily::Plg | SurrogateFamily::Tsg) => {
            if smoothed {
                ActivationRules {
                    name: "lif_smoothed",
                    forward: Box::new(move |u, a| plg_integral(u, cfg.theta_p, pick(a))),
                    backward_input: Box::new(move |u, a| sg_plg(u, cfg.theta_p, pick(a))),
                    backward_aux: learnable.then(|| {
                        Box::new(move |u: f64, a: f64| plg_integral_dalpha(u, cfg.theta_p, a))
                            as Box<dyn Fn(f64, f64) -> f64>
                    }),
                }
            } else {
                ActivationRules {
                    name: "lif_plg",
                    forward: Box::new(move |u, _| lif_fire_scalar(u, cfg.theta_p)),
                    backward_input: Box::new(move |u, a| sg_plg(u, cfg.theta_p, pick(a))),
                    backward_aux: learnable.then(|| {
                        Box::new(move |u: f64, a: f64| sg_plg_dalpha(u, cfg.theta_p, a))
                            as Box<dyn Fn(f64, f64) -> f64>
                    }),
                }
            }
        }
        (NeuronKind::Cf, SurrogateFamily::CfRectangular) => ActivationRules {
            name: "cf_rectangular",
            forward: Box::new(move |u, _| cf_fire_scalar(u, &cfg)),
            backward_input: Box::new(move |u, _| sg_cf_rect(u, &cfg, alpha_fixed)),
            backward_aux: None,
        },
        (NeuronKind::Cf, SurrogateFamily::Plg | SurrogateFamily::Tsg) => {
            let single = surrogate.composition == CfComposition::SingleLevel;
            let grad = move |u: f64, a: f64| {
                if single {
                    cf_single_level_grad(u, a, &cfg)
                } else {
                    cf_total_grad(u, a, &cfg)
                }
            };
            if smoothed {
                ActivationRules {
                    name: "cf_smoothed",
                    forward: Box::new(move |u, a| smoothed_forward(u, pick(a), &cfg)),
                    backward_input: Box::new(move |u, a| cf_total_grad(u, pick(a), &cfg)),
                    backward_aux: learnable.then(|| {
                        Box::new(move |u: f64, a: f64| smoothed_forward_dalpha(u, a, &cfg))
                            as Box<dyn Fn(f64, f64) -> f64>
                    }),
                }
            } else {
                ActivationRules {
                    name: "cf_fire",
                    forward: Box::new(move |u, _| cf_fire_scalar(u, &cfg)),
                    backward_input: Box::new(move |u, a| grad(u, pick(a))),
                    backward_aux: learnable.then(|| {
                        Box::new(move |u: f64, a: f64| {
                            if single {
                                cf_single_level_grad_dalpha(u, a, &cfg)
                            } else {
                                cf_total_grad_dalpha(u, a, &cfg)
                            }
                        }) as Box<dyn Fn(f64, f64) -> f64>
                    }),
                }
            }
        }
        (NeuronKind::Lif, SurrogateFamily::CfRectangular)
        | (NeuronKind::Cf, SurrogateFamily::Rectangular) => {
            unreachable!("rejected by NetworkSpec::validate")
        }
    };
    Ok(Rc::new(rules))
}
