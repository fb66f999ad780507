//! Per-time-step neuron state machines: leaky integrate-and-fire and
//! circulate-firing, plus membrane diagnostics.
//!
//! Firing conventions are deliberate and documented:
//! - LIF fires on `u >= theta` (the step function is 1 at 0).
//! - CF uses strict inequalities on every level: a level-k positive spike
//!   needs `u > k * theta_p`, a level-k negative spike needs `u < k * theta_n`.
//! - CF spikes are signed integers in `[-k_n_max, k_p_max]`; the soft reset
//!   `v = u - s*theta_p` (resp. `v = u + s*theta_n`) then moves the membrane
//!   toward zero and preserves any residual beyond the saturation bound.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetMode {
    Hard,
    Soft,
}

impl ResetMode {
    pub fn name(&self) -> &'static str {
        match self {
            ResetMode::Hard => "hard",
            ResetMode::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(ResetMode::Hard),
            "soft" => Ok(ResetMode::Soft),
            other => Err(Error::Config(format!(
                "unknown reset mode '{other}' (expected hard | soft)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronKind {
    Lif,
    Cf,
}

impl NeuronKind {
    pub fn name(&self) -> &'static str {
        match self {
            NeuronKind::Lif => "lif",
            NeuronKind::Cf => "cf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lif" => Ok(NeuronKind::Lif),
            "cf" => Ok(NeuronKind::Cf),
            other => Err(Error::Config(format!(
                "unknown neuron kind '{other}' (expected lif | cf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NeuronConfig {
    /// Membrane decay factor, in [0, 1].
    pub k_tau: f64,
    /// Positive firing threshold, > 0. Also the LIF threshold.
    pub theta_p: f64,
    /// Negative firing threshold, < 0.
    pub theta_n: f64,
    /// Circulate bound for positive levels (K_P >= 1).
    pub k_p_max: u32,
    /// Circulate bound for negative levels (K_N >= 1).
    pub k_n_max: u32,
    pub reset_mode: ResetMode,
    /// Hard-reset potential.
    pub u_reset: f64,
    pub kind: NeuronKind,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            k_tau: 0.25,
            theta_p: 1.0,
            theta_n: -1.0,
            k_p_max: 2,
            k_n_max: 2,
            reset_mode: ResetMode::Soft,
            u_reset: 0.0,
            kind: NeuronKind::Cf,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_p > 0.0) {
            return Err(Error::Config(format!("theta_p must be > 0, got {}", self.theta_p)));
        }
        if !(self.theta_n < 0.0) {
            return Err(Error::Config(format!("theta_n must be < 0, got {}", self.theta_n)));
        }
        if self.k_p_max < 1 || self.k_n_max < 1 {
            return Err(Error::Config("circulate bounds k_p_max/k_n_max must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.k_tau) {
            return Err(Error::Config(format!("k_tau must be in [0, 1], got {}", self.k_tau)));
        }
        Ok(())
    }
}

/// Post-reset membrane state carried across time steps.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub v: Tensor,
    pub step_index: usize,
}

impl LayerState {
    /// Fresh state with zero membrane, per the zero-initial-potential convention.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Ok(LayerState {
            v: Tensor::zeros(dims)?,
            step_index: 0,
        })
    }

    pub fn reset(&mut self) {
        for v in self.v.values_mut() {
            *v = 0.0;
        }
        self.step_index = 0;
    }
}

// ---- scalar dynamics ----

/// LIF firing: step function with H(0) = 1.
pub fn lif_fire_scalar(u: f64, theta: f64) -> f64 {
    if u - theta >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Signed CF spike count for a single membrane value.
pub fn cf_fire_scalar(u: f64, cfg: &NeuronConfig) -> f64 {
    if u > cfg.theta_p {
        let mut s = 0u32;
        for k in 1..=cfg.k_p_max {
            if u > k as f64 * cfg.theta_p {
                s += 1;
            }
        }
        s as f64
    } else if u < cfg.theta_n {
        let mut s = 0u32;
        for k in 1..=cfg.k_n_max {
            if u < k as f64 * cfg.theta_n {
                s += 1;
            }
        }
        -(s as f64)
    } else {
        0.0
    }
}

/// Soft reset for a single CF element; `s` must come from `cf_fire_scalar`.
pub fn cf_reset_scalar(u: f64, s: f64, cfg: &NeuronConfig) -> f64 {
    if u > cfg.theta_p {
        u - s * cfg.theta_p
    } else if u < cfg.theta_n {
        u + s * cfg.theta_n
    } else {
        u
    }
}

// ---- tensor dynamics ----

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One LIF step: charge, fire, reset. Returns the binary spike tensor and
/// updates the state in place.
pub fn lif_step(state: &mut LayerState, input_current: &Tensor, cfg: &NeuronConfig) -> Result<Tensor> {
    if cfg.kind != NeuronKind::Lif {
        return Err(Error::Config("lif_step called with a non-LIF neuron config".into()));
    }
    check_same_shape(&state.v, input_current, "lif_step")?;
    let theta = cfg.theta_p;
    let mut spikes = Tensor::zeros(state.v.dims())?;
    for i in 0..state.v.numel() {
        let u = cfg.k_tau * state.v.values()[i] + input_current.values()[i];
        let s = lif_fire_scalar(u, theta);
        let v = match cfg.reset_mode {
            ResetMode::Soft => u - s * theta,
            ResetMode::Hard => u * (1.0 - s) + s * cfg.u_reset,
        };
        spikes.values_mut()[i] = s;
        state.v.values_mut()[i] = v;
    }
    state.step_index += 1;
    Ok(spikes)
}

/// CF firing over a membrane tensor; output values are signed integers in
/// `[-k_n_max, k_p_max]` stored as f64.
pub fn cf_fire(u: &Tensor, cfg: &NeuronConfig) -> Tensor {
    u.map(|v| cf_fire_scalar(v, cfg))
}

/// CF soft reset. Errors if any spike lies outside the circulate bounds,
/// which would mean the spikes were not produced by `cf_fire` on this config.
pub fn cf_reset(u: &Tensor, spikes: &Tensor, cfg: &NeuronConfig) -> Result<Tensor> {
    check_same_shape(u, spikes, "cf_reset")?;
    let lo = -(cfg.k_n_max as f64);
    let hi = cfg.k_p_max as f64;
    if let Some(i) = spikes.values().iter().position(|&s| s < lo || s > hi) {
        return Err(Error::Contract(format!(
            "cf_reset: spike {} at element {i} outside [{lo}, {hi}]",
            spikes.values()[i]
        )));
    }
    let mut v = Tensor::zeros(u.dims())?;
    for i in 0..u.numel() {
        v.values_mut()[i] = cf_reset_scalar(u.values()[i], spikes.values()[i], cfg);
    }
    Ok(v)
}

/// One CF step: charge, fire, reset.
pub fn cf_step(state: &mut LayerState, input_current: &Tensor, cfg: &NeuronConfig) -> Result<Tensor> {
    if cfg.kind != NeuronKind::Cf {
        return Err(Error::Config("cf_step called with a non-CF neuron config".into()));
    }
    check_same_shape(&state.v, input_current, "cf_step")?;
    let mut u = Tensor::zeros(state.v.dims())?;
    for i in 0..u.numel() {
        u.values_mut()[i] = cfg.k_tau * state.v.values()[i] + input_current.values()[i];
    }
    let spikes = cf_fire(&u, cfg);
    state.v = cf_reset(&u, &spikes, cfg)?;
    state.step_index += 1;
    Ok(spikes)
}

// ---- spike accounting ----

/// Per-layer, per-step spike-train activity. A row records the train either
/// entering a synaptic layer (for the energy model) or leaving a spiking
/// layer (for diagnostics).
#[derive(Debug, Clone)]
pub struct LayerActivity {
    pub layer: String,
    /// True when the recorded train is analog (direct-encoded input), not spikes.
    pub analog: bool,
    /// Per-step sum of |s| over all elements and samples.
    pub magnitude: Vec<f64>,
    /// Per-step count of nonzero elements.
    pub nonzero: Vec<u64>,
    /// Per-step number of element slots observed.
    pub count: Vec<u64>,
}

/// How multi-level spikes count toward the firing rate: by |s| (a count-2
/// spike is two synaptic events) or by nonzero elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Magnitude,
    Nonzero,
}

impl CountMode {
    pub fn name(&self) -> &'static str {
        match self {
            CountMode::Magnitude => "magnitude",
            CountMode::Nonzero => "nonzero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(CountMode::Magnitude),
            "nonzero" => Ok(CountMode::Nonzero),
            other => Err(Error::Config(format!(
                "unknown count mode '{other}' (expected magnitude | nonzero)"
            ))),
        }
    }
}

impl LayerActivity {
    /// Mean spike magnitude per element slot per step.
    pub fn firing_rate(&self) -> f64 {
        self.firing_rate_by(CountMode::Magnitude)
    }

    pub fn firing_rate_by(&self, mode: CountMode) -> f64 {
        let n: u64 = self.count.iter().sum();
        if n == 0 {
            return 0.0;
        }
        match mode {
            CountMode::Magnitude => self.magnitude.iter().sum::<f64>() / n as f64,
            CountMode::Nonzero => self.nonzero.iter().sum::<u64>() as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SpikeRecord {
    pub rows: Vec<LayerActivity>,
}

impl SpikeRecord {
    pub fn new() -> Self {
        SpikeRecord { rows: Vec::new() }
    }

    fn row_mut(&mut self, layer: &str, analog: bool) -> &mut LayerActivity {
        if let Some(i) = self.rows.iter().position(|r| r.layer == layer) {
            return &mut self.rows[i];
        }
        self.rows.push(LayerActivity {
            layer: layer.to_string(),
            analog,
            magnitude: Vec::new(),
            nonzero: Vec::new(),
            count: Vec::new(),
        });
        self.rows.last_mut().expect("just pushed")
    }

    /// Record one step's worth of a train's values for a layer.
    pub fn observe(&mut self, layer: &str, step: usize, values: &[f64], analog: bool) {
        let row = self.row_mut(layer, analog);
        if row.magnitude.len() <= step {
            row.magnitude.resize(step + 1, 0.0);
            row.nonzero.resize(step + 1, 0);
            row.count.resize(step + 1, 0);
        }
        row.magnitude[step] += values.iter().map(|v| v.abs()).sum::<f64>();
        row.nonzero[step] += values.iter().filter(|&&v| v != 0.0).count() as u64;
        row.count[step] += values.len() as u64;
    }

    pub fn layer(&self, name: &str) -> Option<&LayerActivity> {
        self.rows.iter().find(|r| r.layer == name)
    }

    /// Mean firing rate over all non-analog rows.
    pub fn mean_firing_rate(&self) -> f64 {
        let spike_rows: Vec<&LayerActivity> = self.rows.iter().filter(|r| !r.analog).collect();
        if spike_rows.is_empty() {
            return 0.0;
        }
        spike_rows.iter().map(|r| r.firing_rate()).sum::<f64>() / spike_rows.len() as f64
    }

    /// Merge another record's observations into this one.
    pub fn merge(&mut self, other: &SpikeRecord) {
        for row in &other.rows {
            for step in 0..row.magnitude.len() {
                let dst = self.row_mut(&row.layer, row.analog);
                if dst.magnitude.len() <= step {
                    dst.magnitude.resize(step + 1, 0.0);
                    dst.nonzero.resize(step + 1, 0);
                    dst.count.resize(step + 1, 0);
                }
                dst.magnitude[step] += row.magnitude[step];
                dst.nonzero[step] += row.nonzero[step];
                dst.count[step] += row.count[step];
            }
        }
    }
}

// ---- membrane diagnostics ----

/// Uniform binning spec over `[lo, hi]`; out-of-range samples fall into the
/// nearest edge bin so counts always total the sample count.
#[derive(Debug, Clone, Copy)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl BinSpec {
    pub fn bin_count(&self) -> usize {
        ((self.hi - self.lo) / self.width).round() as usize
    }
}

/// Membrane samples of one layer at one (0-based) time step.
#[derive(Debug, Clone)]
pub struct MembraneSamples {
    pub layer: String,
    pub step: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HistogramRow {
    pub layer: String,
    pub step: usize,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
}

#[derive(Debug, Clone)]
pub struct HistogramSummary {
    pub layer: String,
    pub step: usize,
    pub mean: f64,
    pub variance: f64,
    /// No-reset variance from the exact recurrence (geometric series).
    pub oracle_variance: f64,
}

#[derive(Debug, Clone)]
pub struct HistogramTable {
    pub rows: Vec<HistogramRow>,
    pub summaries: Vec<HistogramSummary>,
}

/// Exact no-reset membrane variance after `t` steps (1-based) of unit-variance
/// charging scaled by `theta`: sum of k_tau^(2i) * theta^2 for i = 0..t-1.
pub fn no_reset_variance_oracle(k_tau: f64, theta: f64, t: usize) -> f64 {
    (0..t).map(|i| k_tau.powi(2 * i as i32) * theta * theta).sum()
}

/// Additive approximation `(1 + (t-1) k_tau^2) theta^2` that counts one
/// decayed contribution per elapsed step without compounding; agrees with the
/// exact recurrence only for t <= 2. Reported alongside the oracle so the
/// discrepancy stays visible.
pub fn no_reset_variance_additive(k_tau: f64, theta: f64, t: usize) -> f64 {
    (1.0 + (t.saturating_sub(1)) as f64 * k_tau * k_tau) * theta * theta
}

/// Bin membrane samples per (layer, step) and attach mean/variance summaries
/// together with the no-reset variance oracle for the same step.
pub fn membrane_histogram(
    samples: &[MembraneSamples],
    bins: &BinSpec,
    k_tau: f64,
    theta: f64,
) -> Result<HistogramTable> {
    if samples.is_empty() || samples.iter().all(|s| s.values.is_empty()) {
        return Err(Error::Contract("membrane_histogram: no samples recorded".into()));
    }
    if bins.width <= 0.0 || bins.hi <= bins.lo {
        return Err(Error::Config(format!(
            "membrane_histogram: bad bin spec [{}, {}] width {}",
            bins.lo, bins.hi, bins.width
        )));
    }
    let nbins = bins.bin_count();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for group in samples {
        if group.values.is_empty() {
            continue;
        }
        let mut counts = vec![0u64; nbins];
        for &v in &group.values {
            let idx = ((v - bins.lo) / bins.width).floor() as isize;
            let idx = idx.clamp(0, nbins as isize - 1) as usize;
            counts[idx] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            rows.push(HistogramRow {
                layer: group.layer.clone(),
                step: group.step,
                bin_left: bins.lo + i as f64 * bins.width,
                bin_right: bins.lo + (i + 1) as f64 * bins.width,
                count: c,
            });
        }
        let n = group.values.len() as f64;
        let mean = group.values.iter().sum::<f64>() / n;
        let variance = group.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        summaries.push(HistogramSummary {
            layer: group.layer.clone(),
            step: group.step,
            mean,
            variance,
            oracle_variance: no_reset_variance_oracle(k_tau, theta, group.step + 1),
        });
    }
    Ok(HistogramTable { rows, summaries })
}

impl HistogramTable {
    /// Wide CSV: bin rows first, then summary rows, with a record column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "record,layer,step,bin_left,bin_right,count,mean,variance,oracle_variance\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "bin,{},{},{:.6},{:.6},{},,,\n",
                r.layer, r.step, r.bin_left, r.bin_right, r.count
            ));
        }
        for s in &self.summaries {
            out.push_str(&format!(
                "summary,{},{},,,,{:.6},{:.6},{:.6}\n",
                s.layer, s.step, s.mean, s.variance, s.oracle_variance
            ));
        }
        out
    }
}

/// Simulate the no-reset membrane recurrence `u_t = k_tau u_(t-1) + I_t` with
/// standard-normal charging scaled by `theta` over `n` independent neurons.
/// Returns the sample variance after each step (1-based).
pub fn no_reset_probe(k_tau: f64, theta: f64, steps: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut u = vec![0.0f64; n];
    let mut vars = Vec::with_capacity(steps);
    for _ in 0..steps {
        for ui in u.iter_mut() {
            *ui = k_tau * *ui + theta * rng.next_normal();
        }
        let mean = u.iter().sum::<f64>() / n as f64;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        vars.push(var);
    }
    vars
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lif_cfg(reset: ResetMode) -> NeuronConfig {
        NeuronConfig {
            kind: NeuronKind::Lif,
            reset_mode: reset,
            ..NeuronConfig::default()
        }
    }

    #[test]
    fn lif_subthreshold_soft() {
        // k_tau=0.25, theta=1, v_prev=0.8, I=0.5 -> u=0.7, no spike, v=0.7
        let cfg = lif_cfg(ResetMode::Soft);
        let mut state = LayerState::zeros(&[1]).unwrap();
        state.v.values_mut()[0] = 0.8;
        let s = lif_step(&mut state, &Tensor::from_vec(&[1], vec![0.5]).unwrap(), &cfg).unwrap();
        assert_eq!(s.values(), &[0.0]);
        assert!((state.v.values()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn lif_fires_and_resets_both_modes() {
        // v_prev=0.8, I=1.0 -> u=1.2, spike; soft v=0.2, hard v=0
        for (mode, want_v) in [(ResetMode::Soft, 0.2), (ResetMode::Hard, 0.0)] {
            let cfg = lif_cfg(mode);
            let mut state = LayerState::zeros(&[1]).unwrap();
            state.v.values_mut()[0] = 0.8;
            let s = lif_step(&mut state, &Tensor::from_vec(&[1], vec![1.0]).unwrap(), &cfg).unwrap();
            assert_eq!(s.values(), &[1.0]);
            assert!((state.v.values()[0] - want_v).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn lif_zero_in_zero_out() {
        let cfg = lif_cfg(ResetMode::Soft);
        let mut state = LayerState::zeros(&[3]).unwrap();
        let s = lif_step(&mut state, &Tensor::zeros(&[3]).unwrap(), &cfg).unwrap();
        assert_eq!(s.values(), &[0.0; 3]);
        assert_eq!(state.v.values(), &[0.0; 3]);
    }

    #[test]
    fn lif_fires_at_exact_threshold() {
        let cfg = lif_cfg(ResetMode::Soft);
        let mut state = LayerState::zeros(&[1]).unwrap();
        let s = lif_step(&mut state, &Tensor::from_vec(&[1], vec![1.0]).unwrap(), &cfg).unwrap();
        assert_eq!(s.values(), &[1.0]);
    }

    #[test]
    fn layer_state_resets_to_zeros() {
        let cfg = lif_cfg(ResetMode::Soft);
        let mut state = LayerState::zeros(&[3]).unwrap();
        lif_step(&mut state, &Tensor::from_vec(&[3], vec![0.4, 0.9, 1.3]).unwrap(), &cfg).unwrap();
        assert!(state.v.values().iter().any(|&v| v != 0.0));
        assert_eq!(state.step_index, 1);
        state.reset();
        assert_eq!(state.v.values(), &[0.0; 3]);
        assert_eq!(state.step_index, 0);
    }

    #[test]
    fn cf_fire_hand_values() {
        let cfg = NeuronConfig::default();
        for (u, want) in [(2.3, 2.0), (0.0, 0.0), (-1.2, -1.0), (5.0, 2.0), (-3.7, -2.0)] {
            assert_eq!(cf_fire_scalar(u, &cfg), want, "u = {u}");
        }
        // strict inequality at the threshold itself
        assert_eq!(cf_fire_scalar(1.0, &cfg), 0.0);
        assert_eq!(cf_fire_scalar(-1.0, &cfg), 0.0);
    }

    #[test]
    fn cf_reset_hand_values() {
        let cfg = NeuronConfig::default();
        let u = Tensor::from_vec(&[3], vec![2.3, 0.4, -1.2]).unwrap();
        let s = cf_fire(&u, &cfg);
        assert_eq!(s.values(), &[2.0, 0.0, -1.0]);
        let v = cf_reset(&u, &s, &cfg).unwrap();
        let want = [0.3, 0.4, -0.2];
        for (got, w) in v.values().iter().zip(want) {
            assert!((got - w).abs() < 1e-12, "{got} vs {w}");
        }
    }

    #[test]
    fn cf_reset_rejects_out_of_range_spikes() {
        let cfg = NeuronConfig::default();
        let u = Tensor::from_vec(&[1], vec![2.3]).unwrap();
        let s = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let err = cf_reset(&u, &s, &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn cf_step_composition() {
        let cfg = NeuronConfig::default();
        let mut state = LayerState::zeros(&[1]).unwrap();
        state.v.values_mut()[0] = 0.8;
        let s = cf_step(&mut state, &Tensor::from_vec(&[1], vec![2.1]).unwrap(), &cfg).unwrap();
        assert_eq!(s.values(), &[2.0]);
        assert!((state.v.values()[0] - 0.3).abs() < 1e-12);

        let mut state = LayerState::zeros(&[1]).unwrap();
        state.v.values_mut()[0] = -0.8;
        let s = cf_step(&mut state, &Tensor::from_vec(&[1], vec![-1.0]).unwrap(), &cfg).unwrap();
        assert_eq!(s.values(), &[-1.0]);
        assert!((state.v.values()[0] - -0.2).abs() < 1e-12);
    }

    #[test]
    fn cf_fire_matches_floor_form_away_from_multiples() {
        let cfg = NeuronConfig::default();
        let mut rng = SplitMix64::new(99);
        for _ in 0..20_000 {
            let u = rng.next_range(-5.0, 5.0);
            if (u / cfg.theta_p).fract().abs() < 1e-9 {
                continue;
            }
            let got = cf_fire_scalar(u, &cfg);
            let want = if u >= 0.0 {
                (u / cfg.theta_p).floor().clamp(0.0, cfg.k_p_max as f64)
            } else {
                -((-u / -cfg.theta_n).floor().clamp(0.0, cfg.k_n_max as f64))
            };
            assert_eq!(got, want, "u = {u}");
        }
    }

    #[test]
    fn charge_conservation_under_soft_reset() {
        let cfg = NeuronConfig::default();
        let mut rng = SplitMix64::new(5);
        for _ in 0..10_000 {
            let u = rng.next_range(-5.0, 5.0);
            let s = cf_fire_scalar(u, &cfg);
            let v = cf_reset_scalar(u, s, &cfg);
            if u >= 0.0 {
                assert!((u - (v + s * cfg.theta_p)).abs() < 1e-12);
            } else {
                assert!((u - (v - s * cfg.theta_n)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_reset_spiking_element_sits_at_u_reset() {
        let cfg = NeuronConfig {
            reset_mode: ResetMode::Hard,
            u_reset: 0.0,
            kind: NeuronKind::Lif,
            ..NeuronConfig::default()
        };
        let mut state = LayerState::zeros(&[4]).unwrap();
        let input = Tensor::from_vec(&[4], vec![1.5, 0.2, 2.0, 0.9]).unwrap();
        let s = lif_step(&mut state, &input, &cfg).unwrap();
        for i in 0..4 {
            if s.values()[i] == 1.0 {
                assert_eq!(state.v.values()[i], cfg.u_reset);
            }
        }
    }

    #[test]
    fn cf_with_single_level_and_sunk_negative_threshold_is_soft_lif() {
        let cf = NeuronConfig {
            k_p_max: 1,
            k_n_max: 1,
            theta_n: -1e12,
            kind: NeuronKind::Cf,
            ..NeuronConfig::default()
        };
        let lif = lif_cfg(ResetMode::Soft);
        let mut cf_state = LayerState::zeros(&[64]).unwrap();
        let mut lif_state = LayerState::zeros(&[64]).unwrap();
        let mut rng = SplitMix64::new(17);
        for _ in 0..50 {
            let input =
                Tensor::from_vec(&[64], (0..64).map(|_| rng.next_range(-1.5, 1.8)).collect())
                    .unwrap();
            let s_cf = cf_step(&mut cf_state, &input, &cf).unwrap();
            let s_lif = lif_step(&mut lif_state, &input, &lif).unwrap();
            assert_eq!(s_cf.values(), s_lif.values());
        }
    }

    #[test]
    fn histogram_hand_binning() {
        let samples = [MembraneSamples {
            layer: "l0".into(),
            step: 0,
            values: vec![-1.0, 0.0, 1.0],
        }];
        let bins = BinSpec { lo: -1.5, hi: 1.5, width: 1.0 };
        let table = membrane_histogram(&samples, &bins, 0.25, 1.0).unwrap();
        let counts: Vec<u64> = table.rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![1, 1, 1]);
    }

    #[test]
    fn histogram_all_zero_samples() {
        let samples = [MembraneSamples {
            layer: "l0".into(),
            step: 0,
            values: vec![0.0; 10],
        }];
        let bins = BinSpec { lo: -1.5, hi: 1.5, width: 1.0 };
        let table = membrane_histogram(&samples, &bins, 0.25, 1.0).unwrap();
        let counts: Vec<u64> = table.rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![0, 10, 0]);
        assert_eq!(table.summaries[0].variance, 0.0);
    }

    #[test]
    fn histogram_empty_is_error() {
        let bins = BinSpec { lo: -1.0, hi: 1.0, width: 0.5 };
        assert!(membrane_histogram(&[], &bins, 0.25, 1.0).is_err());
    }

    #[test]
    fn variance_oracles_agree_only_up_to_t2() {
        let geo = no_reset_variance_oracle(0.25, 1.0, 2);
        let lit = no_reset_variance_additive(0.25, 1.0, 2);
        assert!((geo - lit).abs() < 1e-15);
        assert!((geo - 1.0625).abs() < 1e-15);
        let geo3 = no_reset_variance_oracle(0.25, 1.0, 3);
        let lit3 = no_reset_variance_additive(0.25, 1.0, 3);
        assert!((geo3 - 1.06640625).abs() < 1e-15);
        assert!((lit3 - 1.125).abs() < 1e-15);
    }

    #[test]
    fn spike_record_rates() {
        let mut rec = SpikeRecord::new();
        // CF layer emitting s = 2 on half the elements: f_r = 1.0
        rec.observe("cf", 0, &[2.0, 0.0, 2.0, 0.0], false);
        assert!((rec.layer("cf").unwrap().firing_rate() - 1.0).abs() < 1e-15);
        rec.observe("silent", 0, &[0.0; 8], false);
        assert_eq!(rec.layer("silent").unwrap().firing_rate(), 0.0);
    }
}
