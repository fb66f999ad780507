//! Finite-difference verification of every backward rule.
//!
//! Three categories: per-op checks (tolerance 1e-5), loss checks (1e-5), and
//! the end-to-end oracle (1e-4) where every firing nonlinearity is replaced
//! by its smoothed antiderivative so the whole T-step unroll is classically
//! differentiable. Central differences use step 1e-5 at double precision;
//! relative error is measured against `max(|ad|, |fd|, 1e-6)` so near-zero
//! gradients do not divide by noise.

use crate::data::{encode_batch, synth_dataset, EncoderConfig, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_node, pnb_loss_node, LossConfig};
use crate::network::{ForwardMode, Network, NetworkSpec};
use crate::neuron::NeuronConfig;
use crate::rng::SplitMix64;
use crate::surrogate::{cf_total_grad, smoothed_forward, SurrogateSpec};
use crate::tape::{ActivationRules, NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const OPS_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CategoryResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    /// Which sub-check and element produced the worst error.
    pub worst: String,
    pub skipped: bool,
}

impl CategoryResult {
    pub fn passed(&self) -> bool {
        self.skipped || self.max_rel_err < self.threshold
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub categories: Vec<CategoryResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.categories.iter().all(|c| c.passed())
    }

    pub fn worst_failure(&self) -> Option<&CategoryResult> {
        self.categories.iter().filter(|c| !c.passed()).max_by(|a, b| {
            (a.max_rel_err / a.threshold)
                .partial_cmp(&(b.max_rel_err / b.threshold))
                .expect("finite errors")
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Test fixture: scale the named sub-check's tape gradients by 1.01 so
    /// the reporting path can be exercised deliberately.
    pub corrupt: Option<String>,
    /// PNB weight; 0 skips the PNB category.
    pub lambda: f64,
}

type BuildFn<'a> = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'a>;

/// One named differentiable program: leaves in, scalar out.
struct Check<'a> {
    name: &'a str,
    inputs: Vec<Tensor>,
    build: BuildFn<'a>,
}

/// Compare tape gradients against central differences for one check.
/// Returns (max rel err, description of the worst element).
fn run_check(check: &Check, corrupt: bool) -> Result<(f64, String)> {
    let forward = |inputs: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new().with_finite_checks();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (check.build)(&mut tape, &ids)?;
        if tape.values(out).len() != 1 {
            return Err(Error::Contract(format!(
                "check '{}' must produce a scalar",
                check.name
            )));
        }
        Ok((tape, ids, out))
    };

    let (mut tape, ids, out) = forward(&check.inputs)?;
    tape.backward(out)?;
    let mut ad: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("backward ran").to_vec())
        .collect();
    if corrupt {
        for g in ad.iter_mut().flatten() {
            *g *= 1.01;
        }
    }

    let mut worst = (0.0f64, String::from("-"));
    let mut inputs = check.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].values()[j];
            inputs[i].values_mut()[j] = orig + FD_STEP;
            let (tape_p, _, out_p) = forward(&inputs)?;
            let fp = tape_p.values(out_p)[0];
            inputs[i].values_mut()[j] = orig - FD_STEP;
            let (tape_m, _, out_m) = forward(&inputs)?;
            let fm = tape_m.values(out_m)[0];
            inputs[i].values_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(ad[i][j], fd);
            if err > worst.0 {
                worst = (
                    err,
                    format!("{} input {i} element {j}: ad {} vs fd {}", check.name, ad[i][j], fd),
                );
            }
        }
    }
    Ok(worst)
}

fn rand_tensor(dims: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor {
    let shape: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..shape).map(|_| rng.next_range(lo, hi)).collect())
        .expect("static dims")
}

/// Random values for kinked functions: magnitudes in [0.2, 1.4] with random
/// signs, then nudged off any of the given kink locations.
fn rand_away_from(dims: &[usize], kinks: &[f64], margin: f64, rng: &mut SplitMix64) -> Tensor {
    let n: usize = dims.iter().product();
    let mut values = Vec::with_capacity(n);
    'outer: while values.len() < n {
        let v = rng.next_range(-2.8, 2.8);
        for &k in kinks {
            if (v - k).abs() < margin {
                continue 'outer;
            }
        }
        values.push(v);
    }
    Tensor::from_vec(dims, values).expect("static dims")
}

/// Scalarize a tensor node as a weighted sum so every output element gets a
/// distinct upstream gradient.
fn dot_with(tape: &mut Tape, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    tape.reduce_sum(prod)
}

fn smoothed_rules(cfg: NeuronConfig, alpha: f64) -> std::rc::Rc<ActivationRules> {
    std::rc::Rc::new(ActivationRules {
        name: "smoothed_cf",
        forward: Box::new(move |u, _| smoothed_forward(u, alpha, &cfg)),
        backward_input: Box::new(move |u, _| cf_total_grad(u, alpha, &cfg)),
        backward_aux: None,
    })
}

/// Per-op finite-difference category.
pub fn check_ops(opts: &GradCheckOptions) -> Result<CategoryResult> {
    let mut rng = SplitMix64::new(opts.seed).split_labeled("ops");
    let cfg = NeuronConfig::default();
    let mut checks: Vec<Check> = Vec::new();

    checks.push(Check {
        name: "matmul",
        inputs: vec![
            rand_tensor(&[4, 3], -1.0, 1.0, &mut rng),
            rand_tensor(&[3, 5], -1.0, 1.0, &mut rng),
        ],
        build: Box::new(move |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            let w = rand_tensor(&[4, 5], -1.0, 1.0, &mut SplitMix64::new(7));
            dot_with(tape, y, &w)
        }),
    });
    checks.push(Check {
        name: "conv2d",
        inputs: vec![
            rand_tensor(&[2, 2, 5, 5], -1.0, 1.0, &mut rng),
            rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng),
        ],
        build: Box::new(|tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 2, 1)?;
            let w = rand_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut SplitMix64::new(8));
            dot_with(tape, y, &w)
        }),
    });
    checks.push(Check {
        name: "add_bias",
        inputs: vec![
            rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng),
            rand_tensor(&[3], -1.0, 1.0, &mut rng),
        ],
        build: Box::new(|tape, ids| {
            let y = tape.add_bias(ids[0], ids[1])?;
            let w = rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut SplitMix64::new(9));
            dot_with(tape, y, &w)
        }),
    });
    checks.push(Check {
        name: "add_sub_mul",
        inputs: vec![
            rand_tensor(&[6], -1.0, 1.0, &mut rng),
            rand_tensor(&[6], -1.0, 1.0, &mut rng),
            rand_tensor(&[6], -1.0, 1.0, &mut rng),
        ],
        build: Box::new(|tape, ids| {
            let s = tape.add(ids[0], ids[1])?;
            let d = tape.sub(s, ids[2])?;
            let p = tape.mul(d, ids[0])?;
            let q = tape.scalar_mul(p, 1.7)?;
            let r = tape.scalar_add(q, 0.3)?;
            tape.reduce_sum(r)
        }),
    });
    checks.push(Check {
        name: "reduce_mean",
        inputs: vec![rand_tensor(&[7], -1.0, 1.0, &mut rng)],
        build: Box::new(|tape, ids| tape.reduce_mean(ids[0])),
    });
    checks.push(Check {
        name: "exp_log_sigmoid",
        inputs: vec![rand_tensor(&[5], 0.3, 1.5, &mut rng)],
        build: Box::new(|tape, ids| {
            let e = tape.exp(ids[0])?;
            let l = tape.log(e)?;
            let s = tape.sigmoid(l)?;
            tape.reduce_sum(s)
        }),
    });
    checks.push(Check {
        name: "abs",
        inputs: vec![rand_away_from(&[8], &[0.0], 0.05, &mut rng)],
        build: Box::new(|tape, ids| {
            let a = tape.abs(ids[0])?;
            let w = rand_tensor(&[8], -1.0, 1.0, &mut SplitMix64::new(10));
            dot_with(tape, a, &w)
        }),
    });
    checks.push(Check {
        name: "softmax",
        inputs: vec![rand_tensor(&[3, 4], -2.0, 2.0, &mut rng)],
        build: Box::new(|tape, ids| {
            let s = tape.softmax(ids[0])?;
            let w = rand_tensor(&[3, 4], -1.0, 1.0, &mut SplitMix64::new(11));
            dot_with(tape, s, &w)
        }),
    });
    checks.push(Check {
        name: "narrow_concat_time_mean",
        inputs: vec![rand_tensor(&[6, 3], -1.0, 1.0, &mut rng)],
        build: Box::new(|tape, ids| {
            let a = tape.narrow_rows(ids[0], 0, 3)?;
            let b = tape.narrow_rows(ids[0], 3, 3)?;
            let cat = tape.concat_rows(&[b, a])?;
            let tm = tape.time_mean(cat, 2)?;
            let w = rand_tensor(&[3, 3], -1.0, 1.0, &mut SplitMix64::new(12));
            dot_with(tape, tm, &w)
        }),
    });
    checks.push(Check {
        name: "avg_pool_flatten",
        inputs: vec![rand_tensor(&[2, 2, 4, 4], -1.0, 1.0, &mut rng)],
        build: Box::new(|tape, ids| {
            let p = tape.avg_pool2d(ids[0], 2)?;
            let f = tape.flatten(p)?;
            let w = rand_tensor(&[2, 8], -1.0, 1.0, &mut SplitMix64::new(13));
            dot_with(tape, f, &w)
        }),
    });
    checks.push(Check {
        name: "tdbn_train",
        inputs: vec![
            rand_tensor(&[6, 3], -1.5, 1.5, &mut rng),
            rand_tensor(&[3], 0.5, 1.5, &mut rng),
            rand_tensor(&[3], -0.5, 0.5, &mut rng),
        ],
        build: Box::new(|tape, ids| {
            let (y, _) = tape.tdbn(ids[0], ids[1], ids[2], 1.0, 1e-5, crate::tape::TdbnStats::Batch)?;
            let w = rand_tensor(&[6, 3], -1.0, 1.0, &mut SplitMix64::new(14));
            dot_with(tape, y, &w)
        }),
    });
    checks.push(Check {
        name: "tdbn_eval",
        inputs: vec![
            rand_tensor(&[6, 3], -1.5, 1.5, &mut rng),
            rand_tensor(&[3], 0.5, 1.5, &mut rng),
            rand_tensor(&[3], -0.5, 0.5, &mut rng),
        ],
        build: Box::new(|tape, ids| {
            let (y, _) = tape.tdbn(
                ids[0],
                ids[1],
                ids[2],
                1.0,
                1e-5,
                crate::tape::TdbnStats::Frozen {
                    mean: vec![0.1, -0.2, 0.05],
                    var: vec![0.9, 1.1, 1.0],
                },
            )?;
            let w = rand_tensor(&[6, 3], -1.0, 1.0, &mut SplitMix64::new(15));
            dot_with(tape, y, &w)
        }),
    });
    // CF kinks: level centers, support edges, and zero for alpha = 1
    let kinks: Vec<f64> = vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
    checks.push(Check {
        name: "smoothed_fire_and_reset",
        inputs: vec![rand_away_from(&[12], &kinks, 0.02, &mut rng)],
        build: Box::new(move |tape, ids| {
            let rules = smoothed_rules(cfg, 1.0);
            let s = tape.custom_activation(ids[0], None, rules)?;
            let v = tape.cf_reset(ids[0], s, cfg.theta_p, cfg.theta_n)?;
            let w = rand_tensor(&[12], -1.0, 1.0, &mut SplitMix64::new(16));
            dot_with(tape, v, &w)
        }),
    });

    let mut worst = (0.0f64, String::from("-"));
    for check in &checks {
        let corrupt = opts.corrupt.as_deref() == Some(check.name);
        let (err, desc) = run_check(check, corrupt)?;
        if err > worst.0 {
            worst = (err, desc);
        }
    }
    Ok(CategoryResult {
        name: "ops".into(),
        max_rel_err: worst.0,
        threshold: OPS_TOLERANCE,
        worst: worst.1,
        skipped: false,
    })
}

/// Loss gradients: fused cross-entropy and (membership-frozen) PNB.
pub fn check_losses(opts: &GradCheckOptions) -> Result<(CategoryResult, CategoryResult)> {
    let mut rng = SplitMix64::new(opts.seed).split_labeled("losses");
    let labels = vec![0usize, 2, 1, 2];
    let ce_check = Check {
        name: "cross_entropy",
        inputs: vec![rand_tensor(&[4, 3], -2.0, 2.0, &mut rng)],
        build: Box::new(move |tape, ids| cross_entropy_node(tape, ids[0], &labels)),
    };
    let corrupt = opts.corrupt.as_deref() == Some("cross_entropy");
    let (ce_err, ce_worst) = run_check(&ce_check, corrupt)?;
    let ce = CategoryResult {
        name: "loss_ce".into(),
        max_rel_err: ce_err,
        threshold: OPS_TOLERANCE,
        worst: ce_worst,
        skipped: false,
    };

    let pnb = if opts.lambda == 0.0 {
        CategoryResult {
            name: "loss_pnb".into(),
            max_rel_err: 0.0,
            threshold: OPS_TOLERANCE,
            worst: "skipped (lambda = 0)".into(),
            skipped: true,
        }
    } else {
        let ncfg = NeuronConfig::default();
        let lcfg = LossConfig::default();
        // keep every sample at least 1e-3 from band boundaries and weight kinks
        let boundaries: Vec<f64> = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        let u = rand_away_from(&[24], &boundaries, 2e-3, &mut rng);
        let pnb_check = Check {
            name: "pnb",
            inputs: vec![u],
            build: Box::new(move |tape, ids| pnb_loss_node(tape, ids[0], &ncfg, &lcfg)),
        };
        let corrupt = opts.corrupt.as_deref() == Some("pnb");
        let (err, worst) = run_check(&pnb_check, corrupt)?;
        CategoryResult {
            name: "loss_pnb".into(),
            max_rel_err: err,
            threshold: OPS_TOLERANCE,
            worst,
            skipped: false,
        }
    };
    Ok((ce, pnb))
}

/// End-to-end oracle: a two-spiking-layer network at T = 4 with smoothed
/// firing; BPTT gradients of every parameter (weights, biases, gains, and the
/// TSG grid) against central differences.
pub fn check_end_to_end(opts: &GradCheckOptions) -> Result<CategoryResult> {
    let spec = NetworkSpec {
        layers: NetworkSpec::parse_arch("linear:6 tdbn spike linear:4 spike vote:2")?,
        neuron: NeuronConfig::default(),
        surrogate: SurrogateSpec::default(),
        steps: 4,
        input_dims: vec![2],
        bn_theta: 1.0,
        bn_eps: 1e-5,
        tsg_scale: 4.0,
        tsg_bias: 0.5,
    };
    let mut net = Network::new(spec, opts.seed ^ 0x5EED)?;
    let ds = synth_dataset(
        &SynthSpec { n: 40, seed: opts.seed.wrapping_add(3), separation: 3.0, ..SynthSpec::default() },
        Split::Train,
    )?;
    let indices: Vec<usize> = (0..6).collect();
    let (input, labels) = encode_batch(&ds, &indices, &EncoderConfig::default(), 4, opts.seed)?;
    let lcfg = LossConfig { lambda: 0.0, ..LossConfig::default() };

    let ad = crate::trainer::compute_gradients(
        &mut net,
        &input,
        &labels,
        indices.len(),
        &lcfg,
        ForwardMode::Smoothed,
        false,
    )?;
    let mut grads = ad.grads;
    if opts.corrupt.as_deref() == Some("end_to_end") {
        for g in &mut grads {
            for v in g.values_mut() {
                *v *= 1.01;
            }
        }
    }

    let mut worst = (0.0f64, String::from("-"));
    for pi in 0..net.params.len() {
        for j in 0..net.params[pi].tensor.numel() {
            let orig = net.params[pi].tensor.values()[j];
            net.params[pi].tensor.values_mut()[j] = orig + FD_STEP;
            let fp = crate::trainer::compute_gradients(
                &mut net, &input, &labels, indices.len(), &lcfg, ForwardMode::Smoothed, false,
            )?
            .loss;
            net.params[pi].tensor.values_mut()[j] = orig - FD_STEP;
            let fm = crate::trainer::compute_gradients(
                &mut net, &input, &labels, indices.len(), &lcfg, ForwardMode::Smoothed, false,
            )?
            .loss;
            net.params[pi].tensor.values_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(grads[pi].values()[j], fd);
            if err > worst.0 {
                worst = (
                    err,
                    format!(
                        "{} element {j}: ad {} vs fd {}",
                        net.params[pi].name,
                        grads[pi].values()[j],
                        fd
                    ),
                );
            }
        }
    }
    Ok(CategoryResult {
        name: "end_to_end".into(),
        max_rel_err: worst.0,
        threshold: END_TO_END_TOLERANCE,
        worst: worst.1,
        skipped: false,
    })
}

pub fn run_all(opts: &GradCheckOptions) -> Result<CheckReport> {
    let ops = check_ops(opts)?;
    let (ce, pnb) = check_losses(opts)?;
    let e2e = check_end_to_end(opts)?;
    Ok(CheckReport {
        categories: vec![ops, ce, pnb, e2e],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> GradCheckOptions {
        GradCheckOptions { seed: 12345, corrupt: None, lambda: 0.25 }
    }

    #[test]
    fn all_op_gradients_match_finite_differences() {
        let r = check_ops(&opts()).unwrap();
        assert!(r.passed(), "max rel err {} at {}", r.max_rel_err, r.worst);
    }

    #[test]
    fn two_layer_linear_chain_matches_fd_at_1e6() {
        let mut rng = SplitMix64::new(2024);
        let check = Check {
            name: "linear_chain",
            inputs: vec![
                rand_tensor(&[3, 4], -1.0, 1.0, &mut rng),
                rand_tensor(&[4, 5], -1.0, 1.0, &mut rng),
                rand_tensor(&[5, 2], -1.0, 1.0, &mut rng),
            ],
            build: Box::new(|tape, ids| {
                let h = tape.matmul(ids[0], ids[1])?;
                let y = tape.matmul(h, ids[2])?;
                let w = rand_tensor(&[3, 2], -1.0, 1.0, &mut SplitMix64::new(3));
                dot_with(tape, y, &w)
            }),
        };
        let (err, worst) = run_check(&check, false).unwrap();
        assert!(err < 1e-6, "rel err {err} at {worst}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (ce, pnb) = check_losses(&opts()).unwrap();
        assert!(ce.passed(), "ce: {} at {}", ce.max_rel_err, ce.worst);
        assert!(pnb.passed(), "pnb: {} at {}", pnb.max_rel_err, pnb.worst);
        assert!(!pnb.skipped);
    }

    #[test]
    fn pnb_category_skips_when_lambda_zero() {
        let o = GradCheckOptions { lambda: 0.0, ..opts() };
        let (_, pnb) = check_losses(&o).unwrap();
        assert!(pnb.skipped);
        assert!(pnb.passed());
    }

    #[test]
    fn corrupted_rule_is_caught_and_named() {
        let o = GradCheckOptions { corrupt: Some("matmul".into()), ..opts() };
        let r = check_ops(&o).unwrap();
        assert!(!r.passed());
        assert!(r.worst.contains("matmul"), "{}", r.worst);
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        // two residual blocks, one with an identity skip and one with a
        // 1x1 projection, under the smoothed oracle
        let spec = NetworkSpec {
            layers: NetworkSpec::parse_arch(
                "conv:2,3,1,1 tdbn spike res:2,3,1,1 spike res:3,3,2,1 spike flatten linear:2 spike vote:2",
            )
            .unwrap(),
            neuron: NeuronConfig::default(),
            surrogate: SurrogateSpec::default(),
            steps: 2,
            input_dims: vec![1, 6, 6],
            bn_theta: 1.0,
            bn_eps: 1e-5,
            tsg_scale: 4.0,
            tsg_bias: 0.5,
        };
        let mut net = Network::new(spec, 8).unwrap();
        let mut rng = SplitMix64::new(17);
        let batch = 3;
        let input = rand_tensor(&[2 * batch, 1, 6, 6], -1.0, 1.0, &mut rng);
        let labels = vec![0usize, 1, 0];
        let lcfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let ad = crate::trainer::compute_gradients(
            &mut net, &input, &labels, batch, &lcfg, ForwardMode::Smoothed, false,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for pi in 0..net.params.len() {
            for j in 0..net.params[pi].tensor.numel() {
                let orig = net.params[pi].tensor.values()[j];
                net.params[pi].tensor.values_mut()[j] = orig + FD_STEP;
                let fp = crate::trainer::compute_gradients(
                    &mut net, &input, &labels, batch, &lcfg, ForwardMode::Smoothed, false,
                )
                .unwrap()
                .loss;
                net.params[pi].tensor.values_mut()[j] = orig - FD_STEP;
                let fm = crate::trainer::compute_gradients(
                    &mut net, &input, &labels, batch, &lcfg, ForwardMode::Smoothed, false,
                )
                .unwrap()
                .loss;
                net.params[pi].tensor.values_mut()[j] = orig;
                let fd = (fp - fm) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(ad.grads[pi].values()[j], fd));
            }
        }
        assert!(worst < END_TO_END_TOLERANCE, "max rel err {worst}");
    }
}
