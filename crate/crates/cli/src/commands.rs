//! The five commands: train, eval, gradcheck, energy, inspect.
//!
//! Every artifact lands under the configured output directory. Metrics and
//! diagnostics are CSV with fixed six-decimal formatting so identical runs
//! produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use cfsnn_core::checkpoint;
use cfsnn_core::data::{
    augment_dataset, encode_batch, encoding_is_spike_train, inject_noise, Dataset, Split,
};
use cfsnn_core::energy::{count_flops, estimate_energy, sops_to_mj};
use cfsnn_core::error::{Error, Result};
use cfsnn_core::gradcheck;
use cfsnn_core::network::{ForwardMode, Network};
use cfsnn_core::neuron::{membrane_histogram, MembraneSamples};
use cfsnn_core::rng::SplitMix64;
use cfsnn_core::tape::Tape;
use cfsnn_core::trainer::{cosine_lr, epoch_batches, evaluate, train_step};

use crate::config::RunConfig;

pub struct RunContext {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub what: Option<String>,
    pub sops: Option<f64>,
}

impl RunContext {
    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    fn write_out(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out_dir.join(name), contents)?;
        Ok(())
    }

    fn require_ckpt(&self) -> Result<&Path> {
        self.ckpt
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --ckpt PATH".into()))
    }

    /// Load the configured dataset split, applying the configured noise to
    /// the features before encoding.
    fn dataset_with_noise(&self, split: Split) -> Result<Dataset> {
        let mut ds = self.cfg.load_dataset(split)?;
        if let Some((kind, eps)) = self.cfg.noise()? {
            let range = if ds.value_range.0.is_finite() {
                Some(ds.value_range)
            } else {
                None
            };
            let mut rng = SplitMix64::new(self.cfg.train()?.seed).split_labeled("noise");
            for s in &mut ds.samples {
                *s = inject_noise(s, kind, eps, range, &mut rng)?;
            }
        }
        Ok(ds)
    }
}

fn manifest(ctx: &RunContext, command: &str, seed: u64) -> String {
    let mut m = String::new();
    m.push_str(&format!("tool = cfsnn {}\n", env!("CARGO_PKG_VERSION")));
    m.push_str(&format!("command = {command}\n"));
    m.push_str(&format!("seed = {seed}\n"));
    m.push_str(&ctx.cfg.manifest_body());
    m
}

pub fn cmd_train(ctx: &RunContext) -> Result<()> {
    let tcfg = ctx.cfg.train()?;
    let lcfg = ctx.cfg.loss()?;
    let enc = ctx.cfg.encoder()?;
    let train_ds = ctx.dataset_with_noise(Split::Train)?;
    let test_ds = ctx.dataset_with_noise(Split::Test)?;
    let spec = ctx.cfg.network_spec(&train_ds.feature_dims())?;
    let steps = spec.steps;
    let mut net = Network::new(spec, tcfg.seed)?;

    ctx.ensure_out_dir()?;
    ctx.write_out("manifest.txt", &manifest(ctx, "train", tcfg.seed))?;

    let spikes_in = encoding_is_spike_train(&train_ds, &enc);
    let mut header = String::from(
        "epoch,lr,train_loss,train_ce,train_pnb,test_acc,mean_firing_rate",
    );
    let alpha_grid: Vec<(usize, usize)> = (0..steps)
        .flat_map(|t| (0..net.spike_sites()).map(move |l| (t, l)))
        .collect();
    if net.tsg_param_index().is_some() {
        for (t, l) in &alpha_grid {
            header.push_str(&format!(",alpha_t{t}_l{l}"));
        }
    }
    header.push('\n');
    let mut csv = header;

    // shuffling and encoding are keyed by (seed, epoch) and (seed, sample),
    // so the seed itself is the whole resumable stream state
    let rng_state = tcfg.seed;
    let augment_pad = ctx.cfg.augment()?;
    for epoch in 0..tcfg.epochs {
        let lr = cosine_lr(epoch, tcfg.epochs, tcfg.lr)?;
        let epoch_ds = match augment_pad {
            Some(pad) => augment_dataset(&train_ds, pad, tcfg.seed, epoch)?,
            None => train_ds.clone(),
        };
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut pnb_sum = 0.0;
        let mut seen = 0usize;
        for batch in epoch_batches(epoch_ds.len(), tcfg.batch_size, tcfg.seed, epoch) {
            let (input, labels) = encode_batch(&epoch_ds, &batch, &enc, steps, tcfg.seed)?;
            let out = train_step(&mut net, &input, &labels, batch.len(), lr, &tcfg, &lcfg, spikes_in)?;
            loss_sum += out.loss * batch.len() as f64;
            ce_sum += out.ce * batch.len() as f64;
            pnb_sum += out.pnb * batch.len() as f64;
            seen += batch.len();
        }
        let metrics = evaluate(&mut net, &test_ds, &enc, tcfg.batch_size, tcfg.seed)?;
        let n = seen.max(1) as f64;
        let mut row = format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            epoch,
            lr,
            loss_sum / n,
            ce_sum / n,
            pnb_sum / n,
            metrics.accuracy,
            metrics.record.mean_firing_rate(),
        );
        if net.tsg_param_index().is_some() {
            for &(t, l) in &alpha_grid {
                row.push_str(&format!(",{:.6}", net.alpha_value(t, l)?));
            }
        }
        row.push('\n');
        csv.push_str(&row);

        if tcfg.checkpoint_every > 0 && (epoch + 1) % tcfg.checkpoint_every == 0 {
            checkpoint::save(
                &ctx.out_dir.join(format!("epoch{:04}.ckpt", epoch + 1)),
                &net,
                epoch + 1,
                rng_state,
            )?;
        }
    }
    ctx.write_out("metrics.csv", &csv)?;
    checkpoint::save(&ctx.out_dir.join("final.ckpt"), &net, tcfg.epochs, rng_state)?;
    println!("train: wrote {} epochs to {}", tcfg.epochs, ctx.out_dir.display());
    Ok(())
}

pub fn cmd_eval(ctx: &RunContext) -> Result<()> {
    let tcfg = ctx.cfg.train()?;
    let enc = ctx.cfg.encoder()?;
    let ck = checkpoint::load(ctx.require_ckpt()?)?;
    let mut net = ck.net;
    let ds = ctx.dataset_with_noise(Split::Test)?;
    let metrics = evaluate(&mut net, &ds, &enc, tcfg.batch_size, tcfg.seed)?;
    ctx.ensure_out_dir()?;
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("accuracy,{:.6}\n", metrics.accuracy));
    csv.push_str(&format!("mean_loss,{:.6}\n", metrics.mean_loss));
    csv.push_str(&format!("mean_firing_rate,{:.6}\n", metrics.record.mean_firing_rate()));
    ctx.write_out("eval.csv", &csv)?;
    println!(
        "eval: accuracy {:.4}, mean loss {:.4} over {} samples",
        metrics.accuracy,
        metrics.mean_loss,
        ds.len()
    );
    Ok(())
}

pub fn cmd_gradcheck(ctx: &RunContext) -> Result<()> {
    let opts = ctx.cfg.gradcheck_options()?;
    let report = gradcheck::run_all(&opts)?;
    for c in &report.categories {
        let status = if c.skipped {
            "SKIPPED"
        } else if c.passed() {
            "PASS"
        } else {
            "FAIL"
        };
        println!(
            "{}: max rel err {:.3e} (threshold {:.0e}) {} [{}]",
            c.name, c.max_rel_err, c.threshold, status, c.worst
        );
    }
    if let Some(worst) = report.worst_failure() {
        return Err(Error::Check(format!(
            "gradient check failed in '{}': {} (max rel err {:.3e} over threshold {:.0e})",
            worst.name, worst.worst, worst.max_rel_err, worst.threshold
        )));
    }
    Ok(())
}

pub fn cmd_energy(ctx: &RunContext) -> Result<()> {
    // arithmetic check mode: no model, just the SOP-to-energy conversion
    if let Some(sops) = ctx.sops {
        println!("{:.3} mJ", sops_to_mj(sops));
        return Ok(());
    }
    let tcfg = ctx.cfg.train()?;
    let enc = ctx.cfg.encoder()?;
    let mode = ctx.cfg.count_mode()?;
    let ck = checkpoint::load(ctx.require_ckpt()?)?;
    let mut net = ck.net;
    let ds = ctx.dataset_with_noise(Split::Test)?;
    let metrics = evaluate(&mut net, &ds, &enc, tcfg.batch_size, tcfg.seed)?;
    let flops = count_flops(&net);
    let report = estimate_energy(&flops, &metrics.record, net.spec.steps, mode)?;
    ctx.ensure_out_dir()?;
    ctx.write_out("energy.csv", &report.to_csv())?;
    ctx.write_out("energy.txt", &report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

pub fn cmd_inspect(ctx: &RunContext) -> Result<()> {
    let what = ctx
        .what
        .as_deref()
        .ok_or_else(|| Error::Config("inspect needs --what membranes|alphas|spikes".into()))?;
    let tcfg = ctx.cfg.train()?;
    let enc = ctx.cfg.encoder()?;
    let ck = checkpoint::load(ctx.require_ckpt()?)?;
    let mut net = ck.net;
    let ds = ctx.dataset_with_noise(Split::Test)?;
    ctx.ensure_out_dir()?;

    match what {
        "alphas" => {
            let mut csv = String::from("step,layer,alpha\n");
            for t in 0..net.spec.steps {
                for l in 0..net.spike_sites() {
                    csv.push_str(&format!("{t},{l},{:.6}\n", net.alpha_value(t, l)?));
                }
            }
            ctx.write_out("alphas.csv", &csv)?;
            println!("inspect: wrote alphas.csv");
        }
        "membranes" | "spikes" => {
            // one deterministic batch through the network in eval mode
            let batch: Vec<usize> = (0..ds.len().min(tcfg.batch_size)).collect();
            let steps = net.spec.steps;
            let (input, _) = encode_batch(&ds, &batch, &enc, steps, tcfg.seed)?;
            let spikes_in = encoding_is_spike_train(&ds, &enc);
            let mut tape = Tape::new();
            let staged = net.stage_params(&mut tape);
            let out = net.forward_unroll(&mut tape, &input, batch.len(), ForwardMode::Eval, &staged, spikes_in)?;
            if what == "membranes" {
                let samples: Vec<MembraneSamples> = out
                    .membranes
                    .iter()
                    .map(|m| MembraneSamples {
                        layer: m.layer.clone(),
                        step: m.step,
                        values: tape.values(m.node).to_vec(),
                    })
                    .collect();
                let ncfg = net.spec.neuron;
                let table = membrane_histogram(&samples, &ctx.cfg.bin_spec()?, ncfg.k_tau, ncfg.theta_p)?;
                ctx.write_out("membranes.csv", &table.to_csv())?;
                println!("inspect: wrote membranes.csv");
            } else {
                // integer spike-count distribution per spiking layer
                let ncfg = net.spec.neuron;
                let (lo, hi) = match ncfg.kind {
                    cfsnn_core::neuron::NeuronKind::Cf => (-(ncfg.k_n_max as i64), ncfg.k_p_max as i64),
                    cfsnn_core::neuron::NeuronKind::Lif => (0i64, 1i64),
                };
                let mut csv = String::from("layer,value,count\n");
                let mut names: Vec<String> = Vec::new();
                let mut counts: Vec<Vec<u64>> = Vec::new();
                for m in &out.membranes {
                    let idx = match names.iter().position(|n| *n == m.layer) {
                        Some(i) => i,
                        None => {
                            names.push(m.layer.clone());
                            counts.push(vec![0; (hi - lo + 1) as usize]);
                            names.len() - 1
                        }
                    };
                    // membranes and spikes share the step loop; refire here
                    for &u in tape.values(m.node) {
                        let s = match ncfg.kind {
                            cfsnn_core::neuron::NeuronKind::Cf => {
                                cfsnn_core::neuron::cf_fire_scalar(u, &ncfg)
                            }
                            cfsnn_core::neuron::NeuronKind::Lif => {
                                cfsnn_core::neuron::lif_fire_scalar(u, ncfg.theta_p)
                            }
                        } as i64;
                        counts[idx][(s - lo) as usize] += 1;
                    }
                }
                for (name, row) in names.iter().zip(&counts) {
                    for (i, c) in row.iter().enumerate() {
                        csv.push_str(&format!("{name},{},{c}\n", lo + i as i64));
                    }
                }
                ctx.write_out("spikes.csv", &csv)?;
                println!("inspect: wrote spikes.csv");
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown inspect target '{other}' (expected membranes | alphas | spikes)"
            )))
        }
    }
    Ok(())
}
