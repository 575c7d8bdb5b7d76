//! Optimizer step rules.
//!
//! Every rule is a pure transition `(w, state, g) -> (w', state')`: the
//! functions take their inputs by reference and return fresh values, so a
//! step can be replayed or compared against another rule on identical inputs.
//!
//! The sign family (Lion, CLion, RLion, Lion-K, SignSGD) shares one code path:
//!
//! ```text
//! c  = β₁·m + (1 − β₁)·g
//! w' = w − η·(h(c) + λ·w)
//! m' = β₂·m + (1 − β₂)·g
//! ```
//!
//! and differs only in the activation `h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vecmath::{combine, ensure_same_dim, min_abs_nonzero, sign, sign_vec, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Sgdm,
    SignSgd,
    Adam,
    AdamW,
    Lion,
    RLion,
    CLion,
    LionK,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Sgdm => "sgdm",
            Method::SignSgd => "signsgd",
            Method::Adam => "adam",
            Method::AdamW => "adamw",
            Method::Lion => "lion",
            Method::RLion => "rlion",
            Method::CLion => "clion",
            Method::LionK => "lionk",
        }
    }

    /// Methods whose update is `w − η·(h(c) + λ·w)` with a bounded activation.
    pub fn is_sign_family(self) -> bool {
        matches!(self, Method::SignSgd | Method::Lion | Method::RLion | Method::CLion | Method::LionK)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Activation used by Lion-K.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LionKKind {
    /// `h(c) = tanh(a·c)`
    #[default]
    Tanh,
    /// `h(c)_j = sign(c_j)·1(|c_j| > e)`
    IndicatorSign,
}

/// Hyperparameters for every supported method. Fields a method does not use
/// are ignored by it.
///
/// SGDM and Adam take their momentum coefficient from `beta1`; Adam's second
/// moment uses `beta2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct OptimizerConfig<T> {
    pub method: Method,
    pub eta: T,
    #[serde(default = "defaults::beta1")]
    pub beta1: T,
    #[serde(default = "defaults::beta2")]
    pub beta2: T,
    #[serde(default = "T::zero")]
    pub lambda: T,
    /// Cautious threshold ν (CLion).
    #[serde(default = "defaults::nu")]
    pub nu: T,
    /// Arctan steepness α (RLion).
    #[serde(default = "T::one")]
    pub alpha_curve: T,
    /// Tanh slope a (Lion-K).
    #[serde(default = "T::one")]
    pub a_tanh: T,
    /// Dead-zone half-width e (Lion-K indicator-sign).
    #[serde(default = "defaults::e_indicator")]
    pub e_indicator: T,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: T,
    #[serde(default)]
    pub lionk_kind: LionKKind,
}

mod defaults {
    use crate::scalar::Scalar;

    pub fn beta1<T: Scalar>() -> T {
        T::lit(0.9)
    }
    pub fn beta2<T: Scalar>() -> T {
        T::lit(0.99)
    }
    pub fn nu<T: Scalar>() -> T {
        T::lit(1e-3)
    }
    pub fn e_indicator<T: Scalar>() -> T {
        T::lit(1e-3)
    }
    pub fn epsilon<T: Scalar>() -> T {
        T::lit(1e-8)
    }
}

impl<T: Scalar> OptimizerConfig<T> {
    /// Config for `method` with learning rate `eta` and defaults elsewhere.
    pub fn new(method: Method, eta: T) -> Self {
        Self {
            method,
            eta,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            lambda: T::zero(),
            nu: defaults::nu(),
            alpha_curve: T::one(),
            a_tanh: T::one(),
            e_indicator: defaults::e_indicator(),
            epsilon: defaults::epsilon(),
            lionk_kind: LionKKind::default(),
        }
    }

    pub fn lion(eta: T, beta1: T, beta2: T, lambda: T) -> Self {
        Self { beta1, beta2, lambda, ..Self::new(Method::Lion, eta) }
    }

    pub fn clion(eta: T, beta1: T, beta2: T, lambda: T, nu: T) -> Self {
        Self { beta1, beta2, lambda, nu, ..Self::new(Method::CLion, eta) }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    /// Checks the per-field invariants. Harness-level rules (such as
    /// `λ·η < 1` for stability runs) live in the harness.
    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        let one = T::one();
        if !(self.eta > zero) || !self.eta.is_finite() {
            return Err(Error::config("eta must be positive"));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta >= zero && beta < one) {
                return Err(Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.lambda >= zero) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be non-negative"));
        }
        match self.method {
            Method::CLion if !(self.nu > zero) => return Err(Error::config("nu must be positive")),
            Method::RLion if !(self.alpha_curve > zero) => return Err(Error::config("alpha_curve must be positive")),
            Method::LionK => match self.lionk_kind {
                LionKKind::Tanh if !(self.a_tanh > zero) => return Err(Error::config("a_tanh must be positive")),
                LionKKind::IndicatorSign if !(self.e_indicator > zero) => {
                    return Err(Error::config("e_indicator must be positive"))
                }
                _ => {}
            },
            Method::Adam | Method::AdamW if !(self.epsilon > zero) => {
                return Err(Error::config("epsilon must be positive"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Which CLion branch the most recent step took.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "sign")]
    Sign,
    #[serde(rename = "identity")]
    Identity,
    #[default]
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Sign => "sign",
            Branch::Identity => "identity",
            Branch::NotApplicable => "n/a",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct OptimizerState<T> {
    /// First momentum (heavy-ball buffer for SGDM).
    pub m: Vector<T>,
    /// Adam second moment; stays zero for other methods.
    pub v: Vector<T>,
    pub step: u64,
    pub branch_taken: Branch,
}

/// The interpolated estimator `c` and the activated direction `h(c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct UpdateDirection<T> {
    pub c: Vector<T>,
    pub h_of_c: Vector<T>,
}

/// Output of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step<T> {
    pub w: Vector<T>,
    pub state: OptimizerState<T>,
    /// Present for sign-family methods.
    pub dir: Option<UpdateDirection<T>>,
}

pub fn make_state<T: Scalar>(config: &OptimizerConfig<T>, dim: usize) -> Result<OptimizerState<T>> {
    if dim == 0 {
        return Err(Error::config("dim must be at least 1"));
    }
    config.validate()?;
    Ok(OptimizerState { m: Vector::zeros(dim), v: Vector::zeros(dim), step: 0, branch_taken: Branch::NotApplicable })
}

/// Dispatches on `cfg.method`.
pub fn step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    match cfg.method {
        Method::Sgd => sgd_step(w, g, state, cfg),
        Method::Sgdm => sgdm_step(w, g, state, cfg),
        Method::SignSgd => signsgd_step(w, g, state, cfg),
        Method::Adam => adam_step(w, g, state, cfg),
        Method::AdamW => adamw_step(w, g, state, cfg),
        Method::Lion => lion_step(w, g, state, cfg),
        Method::RLion => rlion_step(w, g, state, cfg),
        Method::CLion => clion_step(w, g, state, cfg),
        Method::LionK => lionk_step(w, g, state, cfg, cfg.lionk_kind),
    }
}

fn check_dims<T: Scalar>(w: &Vector<T>, g: &Vector<T>, state: &OptimizerState<T>) -> Result<()> {
    ensure_same_dim(w, g)?;
    ensure_same_dim(w, &state.m)?;
    ensure_same_dim(w, &state.v)
}

/// `w − η·(h + λ·w)`, with decay applied to the pre-update weights.
fn decoupled_update<T: Scalar>(w: &Vector<T>, h: &Vector<T>, eta: T, lambda: T) -> Result<Vector<T>> {
    w.zip_map(h, |wj, hj| wj - eta * (hj + lambda * wj))
}

fn sign_family_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
    activate: impl FnOnce(&Vector<T>) -> Result<(Vector<T>, Branch)>,
) -> Result<Step<T>> {
    check_dims(w, g, state)?;
    let one = T::one();
    let c = combine(cfg.beta1, &state.m, one - cfg.beta1, g)?;
    let (h_of_c, branch_taken) = activate(&c)?;
    let w_next = decoupled_update(w, &h_of_c, cfg.eta, cfg.lambda)?;
    let m = combine(cfg.beta2, &state.m, one - cfg.beta2, g)?;
    Ok(Step {
        w: w_next,
        state: OptimizerState { m, v: state.v.clone(), step: state.step + 1, branch_taken },
        dir: Some(UpdateDirection { c, h_of_c }),
    })
}

pub fn lion_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    sign_family_step(w, g, state, cfg, |c| Ok((sign_vec(c), Branch::NotApplicable)))
}

/// Cautious Lion: the sign is applied only when every nonzero component of
/// `c` has magnitude at least `ν`; otherwise the step uses `c` itself. An
/// all-zero `c` takes the identity branch.
pub fn clion_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    if !(cfg.nu > T::zero()) {
        return Err(Error::config("nu must be positive"));
    }
    sign_family_step(w, g, state, cfg, |c| {
        Ok(match min_abs_nonzero(c) {
            Some(q) if q >= cfg.nu => (sign_vec(c), Branch::Sign),
            _ => (c.clone(), Branch::Identity),
        })
    })
}

/// Lion with every component of `c` passed through `(2/π)·arctan(α·c)`.
pub fn rlion_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    let alpha = cfg.alpha_curve;
    sign_family_step(w, g, state, cfg, |c| Ok((c.map(|x| T::FRAC_2_PI() * (alpha * x).atan())?, Branch::NotApplicable)))
}

pub fn lionk_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
    kind: LionKKind,
) -> Result<Step<T>> {
    let (a, e) = (cfg.a_tanh, cfg.e_indicator);
    sign_family_step(w, g, state, cfg, |c| {
        let h = match kind {
            LionKKind::Tanh => c.map(|x| (a * x).tanh())?,
            LionKKind::IndicatorSign => c.map(|x| if x.abs() > e { sign(x) } else { T::zero() })?,
        };
        Ok((h, Branch::NotApplicable))
    })
}

/// `w − η·sign(g)`; the momentum buffer is left untouched.
pub fn signsgd_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    check_dims(w, g, state)?;
    let h_of_c = sign_vec(g);
    let w_next = decoupled_update(w, &h_of_c, cfg.eta, T::zero())?;
    Ok(Step {
        w: w_next,
        state: OptimizerState { step: state.step + 1, ..state.clone() },
        dir: Some(UpdateDirection { c: g.clone(), h_of_c }),
    })
}

pub fn sgd_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    check_dims(w, g, state)?;
    let eta = cfg.eta;
    Ok(Step {
        w: w.zip_map(g, |wj, gj| wj - eta * gj)?,
        state: OptimizerState { step: state.step + 1, ..state.clone() },
        dir: None,
    })
}

/// Heavy-ball momentum: `m' = β₁·m + g`, `w' = w − η·m'`.
pub fn sgdm_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    check_dims(w, g, state)?;
    let eta = cfg.eta;
    let m = combine(cfg.beta1, &state.m, T::one(), g)?;
    Ok(Step {
        w: w.zip_map(&m, |wj, mj| wj - eta * mj)?,
        state: OptimizerState { m, v: state.v.clone(), step: state.step + 1, branch_taken: Branch::NotApplicable },
        dir: None,
    })
}

pub fn adam_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    adam_like(w, g, state, cfg, T::zero())
}

/// Adam with decoupled weight decay `w' = w − η·(update + λ·w)`.
pub fn adamw_step<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<Step<T>> {
    adam_like(w, g, state, cfg, cfg.lambda)
}

fn adam_like<T: Scalar>(
    w: &Vector<T>,
    g: &Vector<T>,
    state: &OptimizerState<T>,
    cfg: &OptimizerConfig<T>,
    lambda: T,
) -> Result<Step<T>> {
    check_dims(w, g, state)?;
    let one = T::one();
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    let t = state.step + 1;
    let m = combine(b1, &state.m, one - b1, g)?;
    let g2 = g.map(|x| x * x)?;
    let v = combine(b2, &state.v, one - b2, &g2)?;
    let t = T::from_u64(t).expect("step count representable");
    let bc1 = one - b1.powf(t);
    let bc2 = one - b2.powf(t);
    let update = m.zip_map(&v, |mj, vj| (mj / bc1) / ((vj / bc2).sqrt() + eps))?;
    Ok(Step {
        w: decoupled_update(w, &update, cfg.eta, lambda)?,
        state: OptimizerState { m, v, step: state.step + 1, branch_taken: Branch::NotApplicable },
        dir: None,
    })
}
