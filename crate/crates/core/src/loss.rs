//! Readout cross-entropy, the positive-negative balanced membrane
//! regularizer, and their weighted combination.
//!
//! The PNB loss partitions membrane values into K positive bands
//! `((k-1)*theta_p, k*theta_p]` and K mirrored negative bands (widths use
//! |theta_n|), takes an exponentially weighted mean per band that emphasizes
//! values close to firing, and penalizes the absolute log-ratio between the
//! paired band means. Band membership is a stopped gradient; the weighted
//! mean itself is differentiated, including through the weights.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::neuron::NeuronConfig;
use crate::tape::{NodeId, ScalarFromTensor, Tape};

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the PNB term in the total loss.
    pub lambda: f64,
    /// Stability constant inside the weighted means and the log-ratio.
    pub epsilon: f64,
    /// Upper bound on each per-level log-ratio term.
    pub term_clamp: f64,
    /// Spiking-layer ordinals contributing to the PNB term; None means all.
    pub pnb_layers: Option<Vec<usize>>,
    /// Whether |u| beyond K*theta joins the outermost band of its sign.
    pub include_saturated: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.25,
            epsilon: 1e-6,
            term_clamp: 10.0,
            pnb_layers: None,
            include_saturated: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("loss lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.term_clamp > 0.0) {
            return Err(Error::Config(format!(
                "loss term_clamp must be > 0, got {}",
                self.term_clamp
            )));
        }
        Ok(())
    }

    pub fn layer_contributes(&self, ordinal: usize) -> bool {
        match &self.pnb_layers {
            None => true,
            Some(list) => list.contains(&ordinal),
        }
    }
}

// ---- cross-entropy ----

/// Cross-entropy of one class-score vector against an integer label.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Shape(format!(
            "cross_entropy needs at least 2 classes, got {}",
            scores.len()
        )));
    }
    if label >= scores.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[label])
}

/// Analytic gradient of [`cross_entropy`] with respect to the scores:
/// softmax(scores) - onehot(label).
pub fn cross_entropy_grad(scores: &[f64], label: usize) -> Vec<f64> {
    let mut g = kernels::softmax_rows(scores, 1, scores.len());
    g[label] -= 1.0;
    g
}

/// Batch-mean cross-entropy as a tape node over `[batch, classes]` scores.
pub fn cross_entropy_node(tape: &mut Tape, scores: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.shape(scores);
    if shape.rank() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy: scores must be [batch, classes], got {shape}"
        )));
    }
    let (batch, classes) = (shape.dims()[0], shape.dims()[1]);
    if classes < 2 {
        return Err(Error::Shape(format!(
            "cross_entropy needs at least 2 classes, got {classes}"
        )));
    }
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "cross_entropy: {batch} score rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    tape.scalar_fn(
        scores,
        Rc::new(CrossEntropyFn {
            labels: labels.to_vec(),
            classes,
        }),
    )
}

struct CrossEntropyFn {
    labels: Vec<usize>,
    classes: usize,
}

impl ScalarFromTensor for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&self, x: &[f64]) -> f64 {
        let b = self.labels.len();
        let mut total = 0.0;
        for (r, &label) in self.labels.iter().enumerate() {
            let row = &x[r * self.classes..(r + 1) * self.classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        total / b as f64
    }

    fn backward(&self, x: &[f64], upstream: f64, dx: &mut [f64]) {
        let b = self.labels.len();
        let scale = upstream / b as f64;
        let probs = kernels::softmax_rows(x, b, self.classes);
        for (r, &label) in self.labels.iter().enumerate() {
            for c in 0..self.classes {
                let onehot = if c == label { 1.0 } else { 0.0 };
                dx[r * self.classes + c] += scale * (probs[r * self.classes + c] - onehot);
            }
        }
    }
}

// ---- positive-negative balanced loss ----

/// Band assignment of one membrane value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// 1-based positive band index.
    Positive(u32),
    /// 1-based negative band index.
    Negative(u32),
    None,
}

/// Assign a membrane value to its band. Zero belongs to no band (both
/// innermost intervals are open at 0); saturated values join the outermost
/// band of their sign when `include_saturated` is set.
pub fn pnb_partition(u: f64, ncfg: &NeuronConfig, k_levels: u32, include_saturated: bool) -> Region {
    let theta_p = ncfg.theta_p;
    let theta_mag = -ncfg.theta_n;
    if u > 0.0 {
        for k in 1..=k_levels {
            if u <= k as f64 * theta_p {
                return Region::Positive(k);
            }
        }
        if include_saturated {
            Region::Positive(k_levels)
        } else {
            Region::None
        }
    } else if u < 0.0 {
        for k in 1..=k_levels {
            if u >= -(k as f64) * theta_mag {
                return Region::Negative(k);
            }
        }
        if include_saturated {
            Region::Negative(k_levels)
        } else {
            Region::None
        }
    } else {
        Region::None
    }
}

/// Exponentially weighted band mean: `sum(u * w) / (sum(w) + eps)` with
/// `w = exp(-|center - u|)` and the band's signed threshold as center.
/// An empty band has mean 0.
pub fn pnb_weighted_mean(members: &[f64], center: f64, eps: f64) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let mut num = 0.0;
    let mut den = eps;
    for &u in members {
        let w = (-(center - u).abs()).exp();
        num += u * w;
        den += w;
    }
    num / den
}

fn pnb_centers(ncfg: &NeuronConfig, k: u32) -> (f64, f64) {
    (k as f64 * ncfg.theta_p, -(k as f64) * (-ncfg.theta_n))
}

/// PNB loss over a membrane multiset. Requires K_P == K_N.
pub fn pnb_loss(u: &[f64], ncfg: &NeuronConfig, lcfg: &LossConfig) -> Result<f64> {
    let k_levels = pnb_level_count(ncfg)?;
    let mut total = 0.0;
    for k in 1..=k_levels {
        let (c_pos, c_neg) = pnb_centers(ncfg, k);
        let pos: Vec<f64> = u
            .iter()
            .copied()
            .filter(|&v| pnb_partition(v, ncfg, k_levels, lcfg.include_saturated) == Region::Positive(k))
            .collect();
        let neg: Vec<f64> = u
            .iter()
            .copied()
            .filter(|&v| pnb_partition(v, ncfg, k_levels, lcfg.include_saturated) == Region::Negative(k))
            .collect();
        let mu_pos = pnb_weighted_mean(&pos, c_pos, lcfg.epsilon);
        let mu_neg = pnb_weighted_mean(&neg, c_neg, lcfg.epsilon);
        let ratio = mu_pos.abs() / (mu_neg.abs() + lcfg.epsilon) + lcfg.epsilon;
        total += ratio.ln().abs().min(lcfg.term_clamp);
    }
    Ok(total / k_levels as f64)
}

fn pnb_level_count(ncfg: &NeuronConfig) -> Result<u32> {
    if ncfg.k_p_max != ncfg.k_n_max {
        return Err(Error::Config(format!(
            "pnb loss requires K_P == K_N, got {} and {}",
            ncfg.k_p_max, ncfg.k_n_max
        )));
    }
    Ok(ncfg.k_p_max)
}

/// Combined objective: `ce + lambda * pnb`.
pub fn total_loss(ce: f64, pnb: f64, lcfg: &LossConfig) -> f64 {
    ce + lcfg.lambda * pnb
}

/// PNB loss as a tape node over a membrane tensor. Band membership is frozen
/// during backward; the weighted means (including their weights) carry
/// gradient to every member.
pub fn pnb_loss_node(tape: &mut Tape, u: NodeId, ncfg: &NeuronConfig, lcfg: &LossConfig) -> Result<NodeId> {
    let k_levels = pnb_level_count(ncfg)?;
    lcfg.validate()?;
    tape.scalar_fn(
        u,
        Rc::new(PnbLossFn {
            ncfg: *ncfg,
            k_levels,
            eps: lcfg.epsilon,
            clamp: lcfg.term_clamp,
            include_saturated: lcfg.include_saturated,
        }),
    )
}

struct PnbLossFn {
    ncfg: NeuronConfig,
    k_levels: u32,
    eps: f64,
    clamp: f64,
    include_saturated: bool,
}

/// Per-(side, level) weight and weighted-value sums, gathered in one scan.
struct Bands {
    /// sum(w) + eps per band, positive levels then negative levels.
    weight_sum: Vec<f64>,
    mean: Vec<f64>,
}

impl PnbLossFn {
    fn band_index(&self, region: Region) -> Option<usize> {
        match region {
            Region::Positive(k) => Some((k - 1) as usize),
            Region::Negative(k) => Some((self.k_levels + k - 1) as usize),
            Region::None => None,
        }
    }

    fn center(&self, band: usize) -> f64 {
        let k = (band as u32 % self.k_levels) + 1;
        if band < self.k_levels as usize {
            pnb_centers(&self.ncfg, k).0
        } else {
            pnb_centers(&self.ncfg, k).1
        }
    }

    fn accumulate(&self, x: &[f64]) -> Bands {
        let n_bands = 2 * self.k_levels as usize;
        let mut wsum = vec![self.eps; n_bands];
        let mut uwsum = vec![0.0; n_bands];
        for &v in x {
            let region = pnb_partition(v, &self.ncfg, self.k_levels, self.include_saturated);
            if let Some(b) = self.band_index(region) {
                let w = (-(self.center(b) - v).abs()).exp();
                wsum[b] += w;
                uwsum[b] += v * w;
            }
        }
        let mean = uwsum.iter().zip(&wsum).map(|(&u, &w)| u / w).collect();
        Bands { weight_sum: wsum, mean }
    }

    /// Per-level term value and the gradient factors d(term)/d(mu+-).
    fn level_terms(&self, bands: &Bands) -> Vec<(f64, f64, f64)> {
        (0..self.k_levels as usize)
            .map(|lk| {
                let mu_pos = bands.mean[lk];
                let mu_neg = bands.mean[self.k_levels as usize + lk];
                let ratio = mu_pos.abs() / (mu_neg.abs() + self.eps) + self.eps;
                let log_ratio = ratio.ln();
                if log_ratio.abs() >= self.clamp {
                    return (self.clamp, 0.0, 0.0); // clamped: flat
                }
                let d = log_ratio.signum() / ratio;
                let d_mu_pos = d * mu_pos.signum() / (mu_neg.abs() + self.eps);
                let d_mu_neg = d
                    * (-mu_pos.abs() / ((mu_neg.abs() + self.eps) * (mu_neg.abs() + self.eps)))
                    * mu_neg.signum();
                (log_ratio.abs(), d_mu_pos, d_mu_neg)
            })
            .collect()
    }
}

impl ScalarFromTensor for PnbLossFn {
    fn name(&self) -> &'static str {
        "pnb_loss"
    }

    fn forward(&self, x: &[f64]) -> f64 {
        let bands = self.accumulate(x);
        let total: f64 = self.level_terms(&bands).iter().map(|(t, _, _)| t).sum();
        total / self.k_levels as f64
    }

    fn backward(&self, x: &[f64], upstream: f64, dx: &mut [f64]) {
        let bands = self.accumulate(x);
        let terms = self.level_terms(&bands);
        let level_scale = upstream / self.k_levels as f64;
        for (i, &v) in x.iter().enumerate() {
            let region = pnb_partition(v, &self.ncfg, self.k_levels, self.include_saturated);
            let Some(b) = self.band_index(region) else {
                continue;
            };
            let lk = b % self.k_levels as usize;
            let d_mu = if b < self.k_levels as usize { terms[lk].1 } else { terms[lk].2 };
            if d_mu == 0.0 {
                continue;
            }
            let center = self.center(b);
            let w = (-(center - v).abs()).exp();
            // subgradient 0 at the weight kink v == center
            let dw = if v == center { 0.0 } else { w * (center - v).signum() };
            let dmean_dv = (w + (v - bands.mean[b]) * dw) / bands.weight_sum[b];
            dx[i] += level_scale * d_mu * dmean_dv;
        }
    }
}

/// Combined objective as a tape node; `pnb = None` means the regularizer is off.
pub fn total_loss_node(
    tape: &mut Tape,
    ce: NodeId,
    pnb: Option<NodeId>,
    lcfg: &LossConfig,
) -> Result<NodeId> {
    match pnb {
        Some(p) if lcfg.lambda != 0.0 => {
            let weighted = tape.scalar_mul(p, lcfg.lambda)?;
            tape.add(ce, weighted)
        }
        _ => Ok(ce),
    }
}
