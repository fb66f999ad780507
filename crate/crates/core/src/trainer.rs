//! Training step, optimizer, schedule, and evaluation.
//!
//! One step records the full T-step unroll on a fresh tape, combines the
//! cross-entropy readout with the membrane-balance regularizer, runs backward
//! once, and applies SGD with momentum. The update is the usual fold of
//! weight decay into the gradient: `g = grad + wd * w; m = mu * m + g;
//! w -= lr * m`. The learnable surrogate steepness follows the same rule,
//! optionally with its own learning rate.

use crate::data::{encode_batch, encoding_is_spike_train, Dataset, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_node, pnb_loss_node, total_loss_node, LossConfig};
use crate::network::{ForwardMode, Network, UnrollOutput};
use crate::neuron::SpikeRecord;
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning rate for the TSG steepness grid; None shares `lr`.
    pub tsg_lr: Option<f64>,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 64,
            seed: 1,
            tsg_lr: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be >= 2 for normalization statistics".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine annealing: `lr(e) = lr0 * (1 + cos(pi e / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, eta0: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Config("cosine schedule needs total_epochs >= 1".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} beyond schedule end {total_epochs}"
        )));
    }
    Ok(eta0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()) / 2.0)
}

/// Loss pieces and per-parameter gradients of one batch, without updating.
pub struct GradOutcome {
    pub loss: f64,
    pub ce: f64,
    pub pnb: f64,
    pub grads: Vec<Tensor>,
    pub record: SpikeRecord,
}

/// Forward + backward over one encoded batch. Parameters' own grad buffers
/// are zeroed and refilled; the network is otherwise unchanged except for
/// normalization running statistics in train mode.
pub fn compute_gradients(
    net: &mut Network,
    input: &Tensor,
    labels: &[usize],
    batch: usize,
    lcfg: &LossConfig,
    mode: ForwardMode,
    input_is_spikes: bool,
) -> Result<GradOutcome> {
    lcfg.validate()?;
    let mut tape = Tape::new();
    let staged = net.stage_params(&mut tape);
    let out = net.forward_unroll(&mut tape, input, batch, mode, &staged, input_is_spikes)?;
    // membranes are the state variables; any non-finite value is reported
    // with its layer and step before it can launder through the firing map
    for m in &out.membranes {
        if let Some(i) = tape.values(m.node).iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite membrane at {} step {} element {i}",
                m.layer, m.step
            )));
        }
    }
    let ce = cross_entropy_node(&mut tape, out.scores, labels)?;

    let pnb = if lcfg.lambda != 0.0 {
        let mut terms = Vec::new();
        for m in &out.membranes {
            if lcfg.layer_contributes(m.ordinal) {
                terms.push(pnb_loss_node(&mut tape, m.node, &net.spec.neuron, lcfg)?);
            }
        }
        if terms.is_empty() {
            None
        } else {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Some(tape.scalar_mul(acc, 1.0 / terms.len() as f64)?)
        }
    } else {
        None
    };

    let total = total_loss_node(&mut tape, ce, pnb, lcfg)?;
    let loss_value = tape.values(total)[0];
    if !loss_value.is_finite() {
        // point at the first offending membrane for the diagnostic
        for m in &out.membranes {
            if let Some(i) = tape.values(m.node).iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss; first non-finite membrane at {} step {} element {i}",
                    m.layer, m.step
                )));
            }
        }
        return Err(Error::Numeric("non-finite loss".into()));
    }

    let ce_value = tape.values(ce)[0];
    let pnb_value = pnb.map(|p| tape.values(p)[0]).unwrap_or(0.0);
    tape.backward(total)?;

    let grads: Vec<Tensor> = staged
        .iter()
        .zip(&net.params)
        .map(|(&id, p)| {
            Tensor::new(p.tensor.shape().clone(), tape.grad(id).expect("backward ran").to_vec())
                .expect("grad shape matches")
        })
        .collect();

    let UnrollOutput { record, .. } = out;
    Ok(GradOutcome {
        loss: loss_value,
        ce: ce_value,
        pnb: pnb_value,
        grads,
        record,
    })
}

/// SGD with momentum over all parameters; `lr` may be overridden for the TSG
/// steepness grid.
pub fn sgd_step(net: &mut Network, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
    let tsg_index = net.tsg_param_index();
    for (i, (p, g)) in net.params.iter_mut().zip(grads).enumerate() {
        let lr_eff = match (tsg_index, cfg.tsg_lr) {
            (Some(ti), Some(tl)) if ti == i => tl,
            _ => lr,
        };
        for j in 0..p.tensor.numel() {
            let g_eff = g.values()[j] + cfg.weight_decay * p.tensor.values()[j];
            let m = cfg.momentum * p.momentum.values()[j] + g_eff;
            p.momentum.values_mut()[j] = m;
            p.tensor.values_mut()[j] -= lr_eff * m;
            p.grad.values_mut()[j] = g.values()[j];
        }
    }
}

pub struct StepOutcome {
    pub loss: f64,
    pub ce: f64,
    pub pnb: f64,
    pub record: SpikeRecord,
}

/// One full training step at the given learning rate.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut Network,
    input: &Tensor,
    labels: &[usize],
    batch: usize,
    lr: f64,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    input_is_spikes: bool,
) -> Result<StepOutcome> {
    let out = compute_gradients(net, input, labels, batch, lcfg, ForwardMode::Train, input_is_spikes)?;
    sgd_step(net, &out.grads, lr, tcfg);
    Ok(StepOutcome {
        loss: out.loss,
        ce: out.ce,
        pnb: out.pnb,
        record: out.record,
    })
}

#[derive(Debug, Clone)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub record: SpikeRecord,
}

/// Deterministic evaluation: frozen normalization statistics, no shuffling.
/// `seed` fixes the rate-encoding streams so repeated runs agree bitwise.
pub fn evaluate(
    net: &mut Network,
    ds: &Dataset,
    enc: &EncoderConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Contract("evaluate: dataset is empty".into()));
    }
    let steps = net.spec.steps;
    let classes = net.output_classes();
    if ds.classes > classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network outputs {classes}",
            ds.classes
        )));
    }
    let spikes_in = encoding_is_spike_train(ds, enc);
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut record = SpikeRecord::new();
    let mut at = 0;
    while at < ds.len() {
        let hi = (at + batch_size).min(ds.len());
        let indices: Vec<usize> = (at..hi).collect();
        let (input, labels) = encode_batch(ds, &indices, enc, steps, seed)?;
        let mut tape = Tape::new();
        let staged = net.stage_params(&mut tape);
        let out = net.forward_unroll(&mut tape, &input, indices.len(), ForwardMode::Eval, &staged, spikes_in)?;
        let scores = tape.values(out.scores);
        for (r, &label) in labels.iter().enumerate() {
            let row = &scores[r * classes..(r + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
                .map(|(i, _)| i)
                .expect("at least one class");
            if pred == label {
                correct += 1;
            }
            loss_sum += crate::loss::cross_entropy(row, label)?;
        }
        record.merge(&out.record);
        at = hi;
    }
    Ok(Metrics {
        accuracy: correct as f64 / ds.len() as f64,
        mean_loss: loss_sum / ds.len() as f64,
        record,
    })
}

/// Shuffled index batches for one epoch, deterministic in (seed, epoch).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(seed).split_labeled(&format!("epoch{epoch}"));
    rng.shuffle(&mut indices);
    indices
        .chunks(batch_size)
        .filter(|c| c.len() >= 2) // normalization needs at least two samples
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split, SynthSpec};
    use crate::network::{LayerSpec, NetworkSpec};
    use crate::neuron::NeuronConfig;
    use crate::surrogate::SurrogateSpec;

    fn toy_net(steps: usize, seed: u64) -> Network {
        let spec = NetworkSpec {
            layers: NetworkSpec::parse_arch("linear:8 tdbn spike linear:4 spike vote:2").unwrap(),
            neuron: NeuronConfig::default(),
            surrogate: SurrogateSpec::default(),
            steps,
            input_dims: vec![2],
            bn_theta: 1.0,
            bn_eps: 1e-5,
            tsg_scale: 4.0,
            tsg_bias: 0.5,
        };
        Network::new(spec, seed).unwrap()
    }

    fn toy_batch(net: &Network) -> (Tensor, Vec<usize>) {
        let spec = SynthSpec { n: 40, seed: 3, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        encode_batch(&ds, &[0, 1, 2, 3], &EncoderConfig::default(), net.spec.steps, 5).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.025).unwrap(), 0.025);
        assert!(cosine_lr(10, 10, 0.025).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.025).unwrap() - 0.0125).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.025).is_err());
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let mut net = toy_net(2, 9);
        let before: Vec<Vec<f64>> = net.params.iter().map(|p| p.tensor.values().to_vec()).collect();
        let (input, labels) = toy_batch(&net);
        let tcfg = TrainConfig::default();
        let lcfg = LossConfig::default();
        // lr = 0 via explicit zero learning rate argument
        let out = compute_gradients(&mut net, &input, &labels, 4, &lcfg, ForwardMode::Train, false).unwrap();
        sgd_step(&mut net, &out.grads, 0.0, &tcfg);
        for (p, b) in net.params.iter().zip(&before) {
            assert_eq!(p.tensor.values(), &b[..]);
        }
    }

    #[test]
    fn train_step_is_bit_reproducible() {
        let run = || {
            let mut net = toy_net(3, 11);
            let (input, labels) = toy_batch(&net);
            let tcfg = TrainConfig::default();
            let lcfg = LossConfig::default();
            train_step(&mut net, &input, &labels, 4, 0.025, &tcfg, &lcfg, false).unwrap();
            net.params
                .iter()
                .flat_map(|p| p.tensor.values().iter().map(|v| v.to_bits()))
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss_on_separable_task() {
        let spec = SynthSpec { n: 120, seed: 21, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        let mut net = toy_net(4, 2);
        let tcfg = TrainConfig { batch_size: 20, ..TrainConfig::default() };
        let lcfg = LossConfig::default();
        let enc = EncoderConfig::default();
        let mut first = None;
        let mut last = 0.0;
        for epoch in 0..8 {
            for batch in epoch_batches(ds.len(), tcfg.batch_size, tcfg.seed, epoch) {
                let (input, labels) = encode_batch(&ds, &batch, &enc, 4, tcfg.seed).unwrap();
                let out =
                    train_step(&mut net, &input, &labels, batch.len(), 0.02, &tcfg, &lcfg, false)
                        .unwrap();
                if first.is_none() {
                    first = Some(out.loss);
                }
                last = out.loss;
            }
        }
        assert!(last < first.unwrap() * 0.6, "loss {last} vs {}", first.unwrap());
    }

    #[test]
    fn evaluate_same_checkpoint_twice_is_identical() {
        let spec = SynthSpec { n: 60, seed: 13, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Test).unwrap();
        let mut net = toy_net(2, 31);
        let enc = EncoderConfig::default();
        let a = evaluate(&mut net, &ds, &enc, 16, 7).unwrap();
        let b = evaluate(&mut net, &ds, &enc, 16, 7).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
    }

    #[test]
    fn residual_network_trains_on_digit_images() {
        let synth = SynthSpec {
            kind: crate::data::SynthKind::Digits,
            n: 200,
            seed: 4,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&synth, Split::Train).unwrap();
        let spec = NetworkSpec {
            layers: NetworkSpec::parse_arch(
                "conv:4,3,2,1 tdbn spike res:8,3,2,1 spike pool:7 flatten linear:10 spike vote:10",
            )
            .unwrap(),
            neuron: NeuronConfig::default(),
            surrogate: SurrogateSpec::default(),
            steps: 2,
            input_dims: vec![1, 28, 28],
            bn_theta: 1.0,
            bn_eps: 1e-5,
            tsg_scale: 4.0,
            tsg_bias: 0.5,
        };
        let mut net = Network::new(spec, 6).unwrap();
        let tcfg = TrainConfig { batch_size: 25, ..TrainConfig::default() };
        let lcfg = LossConfig::default();
        let enc = EncoderConfig::default();
        let mut first = None;
        let mut last = 0.0;
        for epoch in 0..3 {
            for batch in epoch_batches(ds.len(), tcfg.batch_size, tcfg.seed, epoch) {
                let (input, labels) = encode_batch(&ds, &batch, &enc, 2, tcfg.seed).unwrap();
                let out =
                    train_step(&mut net, &input, &labels, batch.len(), 0.05, &tcfg, &lcfg, false)
                        .unwrap();
                if first.is_none() {
                    first = Some(out.loss);
                }
                last = out.loss;
            }
        }
        assert!(last < first.unwrap(), "loss {last} vs {}", first.unwrap());
        // spiking sites: post-conv, inside the residual block, post-residual,
        // and the readout layer
        assert_eq!(net.spike_sites(), 4);
    }

    #[test]
    fn untrained_net_sits_near_chance_on_balanced_classes() {
        // zero separation: labels carry no information, so per-sample
        // correctness is Bernoulli(1/10) and the binomial band applies
        let spec = SynthSpec {
            n: 1000,
            seed: 51,
            classes: 10,
            separation: 0.0,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&spec, Split::Test).unwrap();
        let net_spec = NetworkSpec {
            layers: NetworkSpec::parse_arch("linear:20 tdbn spike linear:10 spike vote:10").unwrap(),
            neuron: NeuronConfig::default(),
            surrogate: SurrogateSpec::default(),
            steps: 4,
            input_dims: vec![2],
            bn_theta: 1.0,
            bn_eps: 1e-5,
            tsg_scale: 4.0,
            tsg_bias: 0.5,
        };
        let mut net = Network::new(net_spec, 19).unwrap();
        let m = evaluate(&mut net, &ds, &EncoderConfig::default(), 50, 3).unwrap();
        // 3-sigma binomial band around chance for n = 1000
        assert!((m.accuracy - 0.1).abs() < 0.05, "accuracy {}", m.accuracy);
    }

    #[test]
    fn evaluate_empty_dataset_is_error() {
        let mut ds = synth_dataset(&SynthSpec { n: 40, seed: 1, ..SynthSpec::default() }, Split::Test).unwrap();
        ds.samples.clear();
        ds.labels.clear();
        let mut net = toy_net(2, 1);
        assert!(evaluate(&mut net, &ds, &EncoderConfig::default(), 8, 1).is_err());
    }

    #[test]
    fn spike_layers_must_follow_listed_layers() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Spike, LayerSpec::Vote { classes: 2 }],
            neuron: NeuronConfig::default(),
            surrogate: SurrogateSpec::default(),
            steps: 2,
            input_dims: vec![2],
            bn_theta: 1.0,
            bn_eps: 1e-5,
            tsg_scale: 4.0,
            tsg_bias: 0.5,
        };
        assert!(Network::new(spec, 1).is_err());
    }
}
