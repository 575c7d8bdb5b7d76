//! Learning-rate and momentum schedules tied to the horizon `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::OptimizerConfig;

/// How `η`, `β₁`, `β₂` (and for `theorem3`, the decay cap) depend on `T`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Use the optimizer config as given.
    #[default]
    Constant,
    /// `η = c_η/T^{3/4}`, `β₁ = 1 − c_β₁/√T`, `β₂ = 1 − c_β₂/√T`, and
    /// `λ ≤ 1/(2ηĜT^α)` with `α = schedule_alpha > 1`.
    Theorem3 {
        #[serde(default = "one")]
        c_eta: f64,
        #[serde(default = "one")]
        c_beta1: f64,
        #[serde(default = "one")]
        c_beta2: f64,
        #[serde(default = "default_schedule_alpha")]
        schedule_alpha: f64,
        /// When set, `λ` is this fraction of the cap instead of the
        /// optimizer's own value.
        #[serde(default)]
        lambda_fraction: Option<f64>,
    },
    /// `η = 1/√d` (few iterations).
    Theorem2SmallT,
    /// `η = 1/(√d·T)` (many iterations).
    Theorem2LargeT,
}

fn one() -> f64 {
    1.0
}

pub fn default_schedule_alpha() -> f64 {
    1.25
}

impl Schedule {
    pub fn theorem3(c_eta: f64, c_beta: f64) -> Self {
        Schedule::Theorem3 {
            c_eta,
            c_beta1: c_beta,
            c_beta2: c_beta,
            schedule_alpha: default_schedule_alpha(),
            lambda_fraction: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolvedSchedule {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `1/(2ηĜT^α)` when the schedule defines one and `Ĝ` is known.
    pub lambda_max: Option<f64>,
}

/// Decay cap `1/(2ηĜT^α)` under which iterates of the cautious method stay
/// bounded by `(t+1)ηĜ`.
pub fn lambda_cap(eta: f64, g_hat: f64, steps: usize, schedule_alpha: f64) -> f64 {
    1.0 / (2.0 * eta * g_hat * (steps as f64).powf(schedule_alpha))
}

/// `Ĝ = max(G, √d)`.
pub fn g_hat(g: f64, dim: usize) -> f64 {
    g.max((dim as f64).sqrt())
}

pub fn schedule_params(
    schedule: &Schedule,
    steps: usize,
    dim: usize,
    base: &OptimizerConfig,
    g_hat: Option<f64>,
) -> Result<ResolvedSchedule> {
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    let t = steps as f64;
    let sqrt_d = (dim as f64).sqrt();
    Ok(match *schedule {
        Schedule::Constant => {
            ResolvedSchedule { eta: base.eta, beta1: base.beta1, beta2: base.beta2, lambda_max: None }
        }
        Schedule::Theorem3 { c_eta, c_beta1, c_beta2, schedule_alpha, lambda_fraction } => {
            if !(schedule_alpha > 1.0) {
                return Err(Error::config("schedule_alpha must be > 1"));
            }
            if !(c_eta > 0.0) {
                return Err(Error::config("c_eta must be positive"));
            }
            for (name, c) in [("c_beta1", c_beta1), ("c_beta2", c_beta2)] {
                if !(c > 0.0 && c <= 1.0) {
                    return Err(Error::config(format!("{name} must be in (0, 1]")));
                }
            }
            if let Some(f) = lambda_fraction {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config("lambda_fraction must be in (0, 1]"));
                }
            }
            let eta = c_eta / t.powf(0.75);
            ResolvedSchedule {
                eta,
                beta1: 1.0 - c_beta1 / t.sqrt(),
                beta2: 1.0 - c_beta2 / t.sqrt(),
                lambda_max: g_hat.map(|g| lambda_cap(eta, g, steps, schedule_alpha)),
            }
        }
        Schedule::Theorem2SmallT => {
            ResolvedSchedule { eta: 1.0 / sqrt_d, beta1: base.beta1, beta2: base.beta2, lambda_max: None }
        }
        Schedule::Theorem2LargeT => {
            ResolvedSchedule { eta: 1.0 / (sqrt_d * t), beta1: base.beta1, beta2: base.beta2, lambda_max: None }
        }
    })
}

/// Returns `base` with the schedule's values substituted.
pub fn apply_schedule(
    schedule: &Schedule,
    steps: usize,
    dim: usize,
    base: &OptimizerConfig,
    g_hat: Option<f64>,
) -> Result<OptimizerConfig> {
    let resolved = schedule_params(schedule, steps, dim, base, g_hat)?;
    let mut cfg = OptimizerConfig { eta: resolved.eta, beta1: resolved.beta1, beta2: resolved.beta2, ..base.clone() };
    if let Schedule::Theorem3 { lambda_fraction, .. } = schedule {
        let cap = resolved
            .lambda_max
            .ok_or_else(|| Error::config("theorem3 schedule needs a gradient bound to cap lambda"))?;
        match lambda_fraction {
            Some(f) => cfg.lambda = f * cap,
            None if cfg.lambda > cap => {
                return Err(Error::config(format!("lambda {} exceeds the theorem3 cap {cap}", cfg.lambda)))
            }
            None => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
