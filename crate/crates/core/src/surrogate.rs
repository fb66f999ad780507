//! Surrogate-gradient families, their composition across circulate-firing
//! levels, and a smoothed forward whose exact derivative equals the installed
//! surrogate (the end-to-end gradient oracle).
//!
//! The composition rule for multi-level firing: the spike count is a sum of
//! per-level indicators, so its surrogate derivative is the sum of each
//! indicator's surrogate triangle. The negative branch contributes with
//! positive sign because the signed count increases with the membrane there
//! too. A single-level alternative is kept behind [`CfComposition`] for
//! comparison.

use crate::error::{Error, Result};
use crate::neuron::NeuronConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateFamily {
    /// Fixed rectangular window of height 1/alpha and width alpha around the threshold.
    Rectangular,
    /// Fixed piecewise-linear triangle of height alpha and support 2/alpha.
    Plg,
    /// Fixed rectangle of height alpha spanning all circulate levels of one sign.
    CfRectangular,
    /// Per-level triangles with a learnable steepness per (time step, layer).
    Tsg,
}

impl SurrogateFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rectangular" => Ok(Self::Rectangular),
            "plg" => Ok(Self::Plg),
            "cf_rectangular" => Ok(Self::CfRectangular),
            "tsg" => Ok(Self::Tsg),
            other => Err(Error::Config(format!(
                "unknown surrogate family '{other}' (expected rectangular | plg | cf_rectangular | tsg)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rectangular => "rectangular",
            Self::Plg => "plg",
            Self::CfRectangular => "cf_rectangular",
            Self::Tsg => "tsg",
        }
    }
}

/// How per-level surrogates combine into d(spike count)/d(membrane).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfComposition {
    /// Sum of all level triangles (the default).
    SumLevels,
    /// Only the triangle whose center is nearest the membrane, on its sign side.
    SingleLevel,
}

impl CfComposition {
    pub fn name(&self) -> &'static str {
        match self {
            CfComposition::SumLevels => "sum",
            CfComposition::SingleLevel => "single",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CfComposition::SumLevels),
            "single" => Ok(CfComposition::SingleLevel),
            other => Err(Error::Config(format!(
                "unknown cf composition '{other}' (expected sum | single)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SurrogateSpec {
    pub family: SurrogateFamily,
    /// Fixed steepness/width for the non-learnable families.
    pub alpha: f64,
    pub composition: CfComposition,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec {
            family: SurrogateFamily::Tsg,
            alpha: 2.5,
            composition: CfComposition::SumLevels,
        }
    }
}

impl SurrogateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "surrogate alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Learnable steepness grid: one x per (time step, layer), reparameterized as
/// `alpha = scale * sigmoid(x) + bias` so alpha stays in (bias, scale + bias).
#[derive(Debug, Clone)]
pub struct TsgParams {
    /// Row-major `[step][layer]`.
    pub x: Vec<f64>,
    pub steps: usize,
    pub layers: usize,
    pub scale: f64,
    pub bias: f64,
}

impl TsgParams {
    /// x initialized to 0 so every alpha starts at scale/2 + bias.
    pub fn new(steps: usize, layers: usize, scale: f64, bias: f64) -> Result<Self> {
        if !(scale > 0.0) || bias < 0.0 {
            return Err(Error::Config(format!(
                "tsg scale must be > 0 and bias >= 0, got scale {scale} bias {bias}"
            )));
        }
        Ok(TsgParams {
            x: vec![0.0; steps * layers],
            steps,
            layers,
            scale,
            bias,
        })
    }

    pub fn index(&self, t: usize, l: usize) -> Result<usize> {
        if t >= self.steps || l >= self.layers {
            return Err(Error::Contract(format!(
                "tsg grid index (t={t}, l={l}) outside {}x{}",
                self.steps, self.layers
            )));
        }
        Ok(t * self.layers + l)
    }

    /// alpha(t, l) = scale * sigmoid(x) + bias.
    pub fn alpha(&self, t: usize, l: usize) -> Result<f64> {
        let i = self.index(t, l)?;
        Ok(self.scale * sigmoid(self.x[i]) + self.bias)
    }

    /// d(alpha)/dx at (t, l).
    pub fn dalpha_dx(&self, t: usize, l: usize) -> Result<f64> {
        let i = self.index(t, l)?;
        let s = sigmoid(self.x[i]);
        Ok(self.scale * s * (1.0 - s))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rectangular surrogate: 1/alpha inside the open window |u - theta| < alpha/2.
pub fn sg_rectangular(u: f64, theta: f64, alpha: f64) -> f64 {
    if (u - theta).abs() < alpha / 2.0 {
        1.0 / alpha
    } else {
        0.0
    }
}

/// Piecewise-linear triangle of height alpha centered at theta.
pub fn sg_plg(u: f64, theta: f64, alpha: f64) -> f64 {
    (alpha * (1.0 - alpha * (u - theta).abs())).max(0.0)
}

/// Fixed CF rectangle of height alpha spanning (theta/2, (2K+1) theta/2) on
/// the positive side; the negative side mirrors with |theta_n| as the width
/// scale (the literal formula would give a negative width).
pub fn sg_cf_rect(u: f64, cfg: &NeuronConfig, alpha: f64) -> f64 {
    if u >= 0.0 {
        let k = cfg.k_p_max as f64;
        let center = (k + 1.0) / 2.0 * cfg.theta_p;
        let half_width = cfg.theta_p * k / 2.0;
        if (u - center).abs() < half_width {
            alpha
        } else {
            0.0
        }
    } else {
        let k = cfg.k_n_max as f64;
        let mag = -cfg.theta_n;
        let center = -(k + 1.0) / 2.0 * mag;
        let half_width = mag * k / 2.0;
        if (u - center).abs() < half_width {
            alpha
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelSign {
    Positive,
    Negative,
}

/// Triangle surrogate of the level-k spike indicator: height alpha, centered
/// at k*theta_p (positive) or k*theta_n (negative).
pub fn tsg_eval(u: f64, k: u32, sign: LevelSign, alpha: f64, cfg: &NeuronConfig) -> Result<f64> {
    let bound = match sign {
        LevelSign::Positive => cfg.k_p_max,
        LevelSign::Negative => cfg.k_n_max,
    };
    if k < 1 || k > bound {
        return Err(Error::Contract(format!(
            "tsg_eval: level {k} outside 1..={bound} for the {sign:?} side"
        )));
    }
    let center = match sign {
        LevelSign::Positive => k as f64 * cfg.theta_p,
        LevelSign::Negative => k as f64 * cfg.theta_n,
    };
    Ok((alpha * (1.0 - alpha * (u - center).abs())).max(0.0))
}

/// Sum of all level triangles: the surrogate for d(signed spike count)/du.
pub fn cf_total_grad(u: f64, alpha: f64, cfg: &NeuronConfig) -> f64 {
    let mut total = 0.0;
    for k in 1..=cfg.k_p_max {
        total += triangle(u, k as f64 * cfg.theta_p, alpha);
    }
    for k in 1..=cfg.k_n_max {
        total += triangle(u, k as f64 * cfg.theta_n, alpha);
    }
    total
}

/// Single-level alternative: only the nearest level center on u's sign side.
pub fn cf_single_level_grad(u: f64, alpha: f64, cfg: &NeuronConfig) -> f64 {
    let (step, bound) = if u >= 0.0 {
        (cfg.theta_p, cfg.k_p_max)
    } else {
        (cfg.theta_n, cfg.k_n_max)
    };
    let k = ((u / step).round().abs() as u32).clamp(1, bound);
    triangle(u, k as f64 * step, alpha)
}

/// d(sg_plg)/d(alpha): 1 - 2 alpha |u - theta| on the support, zero outside.
pub fn sg_plg_dalpha(u: f64, theta: f64, alpha: f64) -> f64 {
    triangle_dalpha(u, theta, alpha)
}

/// Antiderivative of the single PLG triangle with S(0) = 0, for the
/// single-threshold smoothed oracle.
pub fn plg_integral(u: f64, theta: f64, alpha: f64) -> f64 {
    triangle_integral(u, theta, alpha) - triangle_integral(0.0, theta, alpha)
}

/// Exact alpha-partial of [`plg_integral`].
pub fn plg_integral_dalpha(u: f64, theta: f64, alpha: f64) -> f64 {
    triangle_integral_dalpha(u, theta, alpha) - triangle_integral_dalpha(0.0, theta, alpha)
}

/// Alpha-partial of the single-level alternative.
pub fn cf_single_level_grad_dalpha(u: f64, alpha: f64, cfg: &NeuronConfig) -> f64 {
    let (step, bound) = if u >= 0.0 {
        (cfg.theta_p, cfg.k_p_max)
    } else {
        (cfg.theta_n, cfg.k_n_max)
    };
    let k = ((u / step).round().abs() as u32).clamp(1, bound);
    triangle_dalpha(u, k as f64 * step, alpha)
}

/// d(cf_total_grad)/d(alpha): on each triangle's support the partial is
/// 1 - 2 alpha |u - center|, zero outside.
pub fn cf_total_grad_dalpha(u: f64, alpha: f64, cfg: &NeuronConfig) -> f64 {
    let mut total = 0.0;
    for k in 1..=cfg.k_p_max {
        total += triangle_dalpha(u, k as f64 * cfg.theta_p, alpha);
    }
    for k in 1..=cfg.k_n_max {
        total += triangle_dalpha(u, k as f64 * cfg.theta_n, alpha);
    }
    total
}

fn triangle(u: f64, center: f64, alpha: f64) -> f64 {
    (alpha * (1.0 - alpha * (u - center).abs())).max(0.0)
}

fn triangle_dalpha(u: f64, center: f64, alpha: f64) -> f64 {
    let d = (u - center).abs();
    if alpha * d < 1.0 {
        1.0 - 2.0 * alpha * d
    } else {
        0.0
    }
}

/// Antiderivative of one unit-area triangle, anchored at its left support
/// edge: 0 below, 1 above, piecewise-quadratic in between.
fn triangle_integral(x: f64, center: f64, alpha: f64) -> f64 {
    let d = x - center;
    let half = 1.0 / alpha;
    if d <= -half {
        0.0
    } else if d <= 0.0 {
        alpha * d + 0.5 * alpha * alpha * d * d + 0.5
    } else if d < half {
        0.5 + alpha * d - 0.5 * alpha * alpha * d * d
    } else {
        1.0
    }
}

/// d(triangle_integral)/d(alpha) at fixed x.
fn triangle_integral_dalpha(x: f64, center: f64, alpha: f64) -> f64 {
    let d = x - center;
    let half = 1.0 / alpha;
    if d <= -half || d >= half {
        0.0
    } else if d <= 0.0 {
        d + alpha * d * d
    } else {
        d - alpha * d * d
    }
}

/// Exact antiderivative of [`cf_total_grad`] with S(0) = 0: monotone,
/// piecewise-quadratic, saturating at +k_p_max / -k_n_max when the triangle
/// supports stay clear of zero. Replacing the firing nonlinearity with this
/// map makes the whole network classically differentiable, with derivative
/// equal to the installed surrogate everywhere.
pub fn smoothed_forward(u: f64, alpha: f64, cfg: &NeuronConfig) -> f64 {
    let mut s = 0.0;
    for k in 1..=cfg.k_p_max {
        let c = k as f64 * cfg.theta_p;
        s += triangle_integral(u, c, alpha) - triangle_integral(0.0, c, alpha);
    }
    for k in 1..=cfg.k_n_max {
        let c = k as f64 * cfg.theta_n;
        s += triangle_integral(u, c, alpha) - triangle_integral(0.0, c, alpha);
    }
    s
}

/// Exact alpha-partial of [`smoothed_forward`], used so the learnable
/// steepness is finite-difference checkable end to end.
pub fn smoothed_forward_dalpha(u: f64, alpha: f64, cfg: &NeuronConfig) -> f64 {
    let mut s = 0.0;
    for k in 1..=cfg.k_p_max {
        let c = k as f64 * cfg.theta_p;
        s += triangle_integral_dalpha(u, c, alpha) - triangle_integral_dalpha(0.0, c, alpha);
    }
    for k in 1..=cfg.k_n_max {
        let c = k as f64 * cfg.theta_n;
        s += triangle_integral_dalpha(u, c, alpha) - triangle_integral_dalpha(0.0, c, alpha);
    }
    s
}
