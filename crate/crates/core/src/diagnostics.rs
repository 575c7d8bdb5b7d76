//! On-trajectory checks of the inequalities that govern sign-based methods.
//!
//! Deterministic checks (sign-Lipschitz bound, iterate bounds, pointwise sign
//! correlation bound) use an absolute slack of [`DETERMINISTIC_SLACK`] and
//! must report zero violations for a correct implementation. Statistical
//! checks (momentum tracking error) compare a replicate average against the
//! bound with a relative allowance of [`STATISTICAL_SLACK`].
//!
//! The full gradient `∇F` is not available for synthetic data drawn from a
//! distribution, so every check that needs it uses the empirical gradient
//! `∇F_S` over the training set instead. Reports record this in
//! `gradient_proxy`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::Branch;
use crate::problems::{full_grad, Dataset, Problem};
use crate::schedule::lambda_cap;
use crate::vecmath::{distance, dot, min_abs_nonzero, norm, sign_vec, NormKind};
use crate::{OptimizerConfig, ParamVector};

pub const DETERMINISTIC_SLACK: f64 = 1e-12;
pub const STATISTICAL_SLACK: f64 = 0.05;
pub const GRADIENT_PROXY: &str = "empirical full gradient over the training set";

/// Factor applied to the largest observed gradient norm when no bound is
/// declared.
pub const EMPIRICAL_G_FACTOR: f64 = 1.5;

/// One optimizer step. `w` is the iterate after the step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub t: usize,
    /// First sample index of the step's mini-batch.
    pub index: usize,
    pub w: ParamVector,
    /// Interpolated direction; absent for methods that do not form one.
    pub c: Option<ParamVector>,
    pub g: ParamVector,
    pub m: ParamVector,
    pub branch: Branch,
    /// Mini-batch loss at the pre-step iterate.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub w0: ParamVector,
    pub steps: Vec<TrajectoryStep>,
    pub config: OptimizerConfig,
    pub declared_g: Option<f64>,
    pub declared_l: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.w0.dim()
    }

    /// `w_t` for `t = 0..=T`.
    pub fn iterate(&self, t: usize) -> &ParamVector {
        if t == 0 {
            &self.w0
        } else {
            &self.steps[t - 1].w
        }
    }

    pub fn max_grad_norm(&self) -> f64 {
        self.steps.iter().map(|s| norm(&s.g, NormKind::L2)).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

impl InequalityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, ok: lhs <= rhs + DETERMINISTIC_SLACK }
    }

    /// `lhs − rhs`; positive means violated.
    pub fn margin(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// Aggregate of many deterministic checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CheckSummary {
    pub checked: usize,
    pub violations: usize,
    /// Largest `lhs − rhs` seen; negative when every check held.
    pub worst_margin: Option<f64>,
}

impl CheckSummary {
    pub fn record(&mut self, c: &InequalityCheck) {
        self.checked += 1;
        if !c.ok {
            self.violations += 1;
        }
        let m = c.margin();
        self.worst_margin = Some(self.worst_margin.map_or(m, |w| w.max(m)));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TauEstimate {
    pub tau: Option<f64>,
    /// Steps whose direction was identically zero (or absent) and so were
    /// excluded from the minimum.
    pub skipped_steps: usize,
}

/// Smallest nonzero `|c_j|` over all steps.
pub fn tau_of(traj: &Trajectory) -> TauEstimate {
    let mut tau: Option<f64> = None;
    let mut skipped = 0;
    for step in &traj.steps {
        match step.c.as_ref().and_then(min_abs_nonzero) {
            Some(q) => tau = Some(tau.map_or(q, |t| t.min(q))),
            None => skipped += 1,
        }
    }
    TauEstimate { tau, skipped_steps: skipped }
}

/// `‖sign(c) − sign(c′)‖ ≤ (2√d/τ)·‖c − c′‖`, valid whenever `τ` is no larger
/// than any nonzero `|c_j|` or `|c′_j|`.
pub fn check_lemma1(c: &ParamVector, c2: &ParamVector, tau: f64) -> Result<InequalityCheck> {
    if !(tau > 0.0) {
        return Err(Error::Precondition("tau must be positive".into()));
    }
    let floor = [min_abs_nonzero(c), min_abs_nonzero(c2)].into_iter().flatten().fold(f64::INFINITY, f64::min);
    if tau > floor {
        return Err(Error::Precondition("tau too large for inputs".into()));
    }
    let lhs = distance(&sign_vec(c), &sign_vec(c2), NormKind::L2)?;
    let d = c.dim() as f64;
    let rhs = 2.0 * d.sqrt() / tau * distance(c, c2, NormKind::L2)?;
    Ok(InequalityCheck::new(lhs, rhs))
}

/// Pointwise `⟨x, sign(x) − sign(y)⟩ ≤ 2√d·‖x − y‖`.
pub fn check_lemma_c1(x: &ParamVector, y: &ParamVector) -> Result<InequalityCheck> {
    let diff = sign_vec(x).zip_map(&sign_vec(y), |a, b| a - b)?;
    let lhs = dot(x, &diff)?;
    let rhs = 2.0 * (x.dim() as f64).sqrt() * distance(x, y, NormKind::L2)?;
    Ok(InequalityCheck::new(lhs, rhs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub t: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma2Report {
    pub preconditions_met: bool,
    /// Why the check was skipped, when it was.
    pub skipped_reason: Option<String>,
    pub g_hat: f64,
    pub lambda_cap: f64,
    pub steps_checked: usize,
    /// `‖w_t‖ ≤ (t+1)ηĜ`
    pub norm_violations: Vec<Violation>,
    /// `‖w_t − w_{t−1}‖ ≤ 2ηĜ`
    pub step_violations: Vec<Violation>,
    pub worst_norm_margin: Option<f64>,
    pub worst_step_margin: Option<f64>,
}

impl Lemma2Report {
    pub fn violations(&self) -> usize {
        self.norm_violations.len() + self.step_violations.len()
    }
}

/// Iterate bounds `‖w_t‖ ≤ (t+1)ηĜ` and `‖w_t − w_{t−1}‖ ≤ 2ηĜ`, which hold
/// for the cautious method when `‖w₀‖ ≤ ηĜ` and `λ ≤ 1/(2ηĜT^α)`. If those
/// preconditions fail the check is skipped and says so.
pub fn check_lemma2(traj: &Trajectory, eta: f64, lambda: f64, g_hat: f64, schedule_alpha: f64) -> Result<Lemma2Report> {
    if !(schedule_alpha > 1.0) {
        return Err(Error::config("schedule_alpha must be > 1"));
    }
    let steps = traj.len().max(1);
    let cap = lambda_cap(eta, g_hat, steps, schedule_alpha);
    let mut report = Lemma2Report {
        preconditions_met: true,
        skipped_reason: None,
        g_hat,
        lambda_cap: cap,
        steps_checked: 0,
        norm_violations: Vec::new(),
        step_violations: Vec::new(),
        worst_norm_margin: None,
        worst_step_margin: None,
    };
    let w0 = norm(&traj.w0, NormKind::L2);
    let mut unmet = Vec::new();
    if w0 > eta * g_hat + DETERMINISTIC_SLACK {
        unmet.push(format!("‖w0‖ = {w0} exceeds ηĜ = {}", eta * g_hat));
    }
    if lambda > cap * (1.0 + 1e-12) {
        unmet.push(format!("lambda = {lambda} exceeds 1/(2ηĜT^α) = {cap}"));
    }
    if !unmet.is_empty() {
        report.preconditions_met = false;
        report.skipped_reason = Some(format!("preconditions not satisfied: {}", unmet.join("; ")));
        return Ok(report);
    }
    let step_bound = 2.0 * eta * g_hat;
    for t in 1..=traj.len() {
        let w = traj.iterate(t);
        let norm_margin = norm(w, NormKind::L2) - (t as f64 + 1.0) * eta * g_hat;
        let step_margin = distance(w, traj.iterate(t - 1), NormKind::L2)? - step_bound;
        if norm_margin > DETERMINISTIC_SLACK {
            report.norm_violations.push(Violation { t, margin: norm_margin });
        }
        if step_margin > DETERMINISTIC_SLACK {
            report.step_violations.push(Violation { t, margin: step_margin });
        }
        report.worst_norm_margin = Some(report.worst_norm_margin.map_or(norm_margin, |m| m.max(norm_margin)));
        report.worst_step_margin = Some(report.worst_step_margin.map_or(step_margin, |m| m.max(step_margin)));
        report.steps_checked += 1;
    }
    Ok(report)
}

/// Constants entering the tracking-error bound. `None` means unknown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Lemma3Constants {
    pub sigma: Option<f64>,
    pub g: Option<f64>,
    pub l: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eta: Option<f64>,
}

impl Lemma3Constants {
    /// Takes `β₁`, `β₂`, `η` from an optimizer config.
    pub fn with_config(self, cfg: &OptimizerConfig) -> Self {
        Self { beta1: Some(cfg.beta1), beta2: Some(cfg.beta2), eta: Some(cfg.eta), ..self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma3Report {
    /// Replicate average of `(1/T)·Σ_t ‖c_{t+1} − ∇F_S(w_t)‖`.
    pub lhs: f64,
    pub rhs: f64,
    /// The four summands of `rhs`, in order.
    pub rhs_terms: [f64; 4],
    pub ok: bool,
    pub replicates: usize,
    pub horizon: usize,
    pub g_hat: f64,
    pub constants: Lemma3Constants,
    pub gradient_proxy: &'static str,
}

/// Momentum tracking error against
/// `√(2(σ²+G²))/√((1−β₂)T) + 2√2·LĜη/(1−β₂) + √2|β₁−β₂|σ/√(1−β₂) + (1−β₁)σ/√(1−β₂)`.
///
/// A trajectory of `T + 1` steps contributes the `T` terms
/// `‖c_{t+1} − ∇F_S(w_t)‖`, `t = 1..=T`.
pub fn check_lemma3(
    trajs: &[Trajectory],
    problem: &Problem,
    ds: &Dataset,
    constants: Lemma3Constants,
) -> Result<Lemma3Report> {
    let mut missing = Vec::new();
    let mut need = |name: &str, v: Option<f64>| {
        if v.is_none() {
            missing.push(name.to_string());
        }
        v.unwrap_or(f64::NAN)
    };
    let sigma = need("sigma", constants.sigma);
    let g = need("G", constants.g);
    let l = need("L", constants.l);
    let beta1 = need("beta1", constants.beta1);
    let beta2 = need("beta2", constants.beta2);
    let eta = need("eta", constants.eta);
    if !missing.is_empty() {
        return Err(Error::MissingConstants(missing));
    }
    let horizon = trajs.iter().map(|t| t.len()).min().unwrap_or(0).saturating_sub(1);
    if horizon == 0 {
        return Err(Error::Precondition("tracking-error check needs trajectories of at least 2 steps".into()));
    }
    let mut lhs = 0.0;
    for traj in trajs {
        let mut sum = 0.0;
        for t in 1..=horizon {
            let c_next = traj.steps[t]
                .c
                .as_ref()
                .ok_or_else(|| Error::Precondition("tracking-error check needs a method that forms c_t".into()))?;
            sum += distance(c_next, &full_grad(problem, traj.iterate(t), ds)?, NormKind::L2)?;
        }
        lhs += sum / horizon as f64;
    }
    lhs /= trajs.len() as f64;

    let g_hat = g.max((problem.dim() as f64).sqrt());
    let t = horizon as f64;
    let one_m_b2 = 1.0 - beta2;
    let terms = [
        (2.0 * (sigma * sigma + g * g)).sqrt() / (one_m_b2 * t).sqrt(),
        2.0 * 2f64.sqrt() * l * g_hat * eta / one_m_b2,
        2f64.sqrt() * (beta1 - beta2).abs() * sigma / one_m_b2.sqrt(),
        (1.0 - beta1) * sigma / one_m_b2.sqrt(),
    ];
    let rhs: f64 = terms.iter().sum();
    Ok(Lemma3Report {
        lhs,
        rhs,
        rhs_terms: terms,
        ok: lhs <= rhs * (1.0 + STATISTICAL_SLACK),
        replicates: trajs.len(),
        horizon,
        g_hat,
        constants,
        gradient_proxy: GRADIENT_PROXY,
    })
}

/// Running average of `‖∇F_S(w_t)‖₁` for `t = 1..=T`; the last entry is the
/// convergence metric `(1/T)·Σ_t ‖∇F_S(w_t)‖₁`.
pub fn avg_l1_grad(traj: &Trajectory, problem: &Problem, ds: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(traj.len());
    let mut sum = 0.0;
    for t in 1..=traj.len() {
        sum += norm(&full_grad(problem, traj.iterate(t), ds)?, NormKind::L1);
        out.push(sum / t as f64);
    }
    Ok(out)
}

/// Largest `ν₀` with `ν₀‖c_t‖₁ ≤ ‖c_t‖²` on every identity-branch step with
/// `c_t ≠ 0`: the minimum of `‖c_t‖²/‖c_t‖₁` over those steps.
pub fn nu0_estimate(traj: &Trajectory) -> Option<f64> {
    traj.steps
        .iter()
        .filter(|s| s.branch == Branch::Identity)
        .filter_map(|s| s.c.as_ref())
        .filter(|c| !c.is_zero())
        .map(|c| {
            let l2 = norm(c, NormKind::L2);
            l2 * l2 / norm(c, NormKind::L1)
        })
        .reduce(f64::min)
}

/// Fraction of steps that took the sign branch (CLion only).
pub fn branch_fraction(traj: &Trajectory) -> Option<f64> {
    let (sign, total) = traj.steps.iter().fold((0usize, 0usize), |(s, n), step| match step.branch {
        Branch::Sign => (s + 1, n + 1),
        Branch::Identity => (s, n + 1),
        Branch::NotApplicable => (s, n),
    });
    (total > 0).then(|| sign as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GSource {
    Declared,
    Empirical,
}

/// Gradient bound: the declared one, else `1.5 × max_t ‖g_t‖`.
pub fn gradient_bound(traj: &Trajectory) -> (f64, GSource) {
    match traj.declared_g {
        Some(g) => (g, GSource::Declared),
        None => (EMPIRICAL_G_FACTOR * traj.max_grad_norm(), GSource::Empirical),
    }
}

/// Everything [`diagnose`] reports for one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub gradient_proxy: &'static str,
    pub steps: usize,
    pub dim: usize,
    pub tau: Option<f64>,
    pub tau_skipped_steps: usize,
    pub nu: Option<f64>,
    pub nu0_estimate: Option<f64>,
    pub inv_sqrt_d: f64,
    /// Whether `ν₀ ≥ 1/√d`; reported, not asserted.
    pub nu0_at_least_inv_sqrt_d: Option<bool>,
    pub g: f64,
    pub g_source: GSource,
    pub g_hat: f64,
    /// Sign-Lipschitz check between this trajectory's `c_t` and a twin's.
    pub lemma1: CheckSummary,
    pub lemma2: Lemma2Report,
    pub lemma3: Option<Lemma3Report>,
    /// Why the tracking-error check could not run, when it could not.
    pub lemma3_error: Option<String>,
    /// Pointwise check with `x = ∇F_S(w_{t−1})`, `y = c_t`.
    pub lemma_c1: CheckSummary,
    pub avg_l1_grad: Vec<f64>,
    pub branch_fraction: Option<f64>,
}

/// Inputs to [`diagnose`] beyond the main trajectory.
pub struct DiagnoseInputs<'a> {
    /// Trajectory on the dataset with one sample replaced, sharing the index
    /// sequence; enables the sign-Lipschitz check.
    pub twin: Option<&'a Trajectory>,
    /// Independent trajectories averaged by the tracking-error check. When
    /// empty the main trajectory is used alone.
    pub replicates: &'a [Trajectory],
    pub constants: Lemma3Constants,
    pub schedule_alpha: f64,
}

pub fn diagnose(
    traj: &Trajectory,
    problem: &Problem,
    ds: &Dataset,
    inputs: DiagnoseInputs<'_>,
) -> Result<DiagnosticsReport> {
    let dim = traj.dim();
    let cfg = &traj.config;
    let tau = tau_of(traj);
    let (g, g_source) = gradient_bound(traj);
    let g_hat = g.max((dim as f64).sqrt());
    let nu0 = nu0_estimate(traj);
    let inv_sqrt_d = 1.0 / (dim as f64).sqrt();

    let mut lemma1 = CheckSummary::default();
    if let Some(twin) = inputs.twin {
        let joint = match (tau.tau, tau_of(twin).tau) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        if let Some(tau_joint) = joint {
            for (a, b) in traj.steps.iter().zip(&twin.steps) {
                if let (Some(c), Some(c2)) = (&a.c, &b.c) {
                    lemma1.record(&check_lemma1(c, c2, tau_joint)?);
                }
            }
        }
    }

    let mut lemma_c1 = CheckSummary::default();
    for (t, step) in traj.steps.iter().enumerate() {
        if let Some(c) = &step.c {
            let grad = full_grad(problem, traj.iterate(t), ds)?;
            lemma_c1.record(&check_lemma_c1(&grad, c)?);
        }
    }

    let lemma2 = check_lemma2(traj, cfg.eta, cfg.lambda, g_hat, inputs.schedule_alpha)?;

    let constants = Lemma3Constants { g: inputs.constants.g.or(Some(g)), ..inputs.constants }.with_config(cfg);
    let single = [traj.clone()];
    let reps = if inputs.replicates.is_empty() { &single[..] } else { inputs.replicates };
    let (lemma3, lemma3_error) = match check_lemma3(reps, problem, ds, constants) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };

    Ok(DiagnosticsReport {
        gradient_proxy: GRADIENT_PROXY,
        steps: traj.len(),
        dim,
        tau: tau.tau,
        tau_skipped_steps: tau.skipped_steps,
        nu: (cfg.method == crate::optim::Method::CLion).then_some(cfg.nu),
        nu0_estimate: nu0,
        inv_sqrt_d,
        nu0_at_least_inv_sqrt_d: nu0.map(|v| v >= inv_sqrt_d),
        g,
        g_source,
        g_hat,
        lemma1,
        lemma2,
        lemma3,
        lemma3_error,
        lemma_c1,
        avg_l1_grad: avg_l1_grad(traj, problem, ds)?,
        branch_fraction: branch_fraction(traj),
    })
}
