//! Twin-trajectory stability probe.
//!
//! The same optimizer runs on a dataset `S` and on `S⁽ⁱ⁾` (sample `i`
//! replaced by a fresh draw) with one shared initialization and one shared
//! index sequence. The distance between the twins measures how much a single
//! sample moves the output; averaged over replicates it estimates the
//! expected divergence that uniform-stability bounds control.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::harness::{check_decay, init_params, step_indices};
use crate::optim::{self, Method};
use crate::output::{cell, config_hash, write_json, CsvTable};
use crate::problems::{batch_grad, losses, replace_sample, DataConfig, Dataset, Problem, ProblemConfig};
use crate::rng::{derive_seed, CounterRng, Stream};
use crate::schedule::{self, apply_schedule, Schedule};
use crate::vecmath::{distance, min_abs_nonzero, sign_vec, NormKind};
use crate::OptimizerConfig;

/// Slack for the per-step divergence recursion, relative to the quantities
/// involved.
const RECURSION_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinRunSpec {
    pub problem: ProblemConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    /// 0-based index of the replaced sample.
    pub replace_index: usize,
    #[serde(default)]
    pub replacement_seed: u64,
    #[serde(default)]
    pub index_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub allow_zero_lambda: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapEstimate {
    /// Mean test loss minus mean train loss.
    pub gap: f64,
    /// Monte-Carlo standard error of the test mean.
    pub stderr: f64,
}

/// Held-out estimate of `F(w) − F_S(w)`.
pub fn gap_estimate(problem: &Problem, w: &crate::ParamVector, train: &Dataset, test: &Dataset) -> Result<GapEstimate> {
    let tr = losses(problem, w, train)?;
    let te = losses(problem, w, test)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (m_tr, m_te) = (mean(&tr), mean(&te));
    let stderr = if te.len() > 1 {
        let var = te.iter().map(|x| (x - m_te).powi(2)).sum::<f64>() / (te.len() - 1) as f64;
        (var / te.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(GapEstimate { gap: m_te - m_tr, stderr })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    /// `‖w_t − w_t⁽ⁱ⁾‖₂` for `t = 0..=T`; entry 0 is always 0.
    pub divergence_curve: Vec<f64>,
    /// `‖m_t − m_t⁽ⁱ⁾‖₂` for `t = 0..=T`.
    pub momentum_divergence: Vec<f64>,
    pub final_divergence: f64,
    pub gap: GapEstimate,
    /// Smallest nonzero `|c_j|` over both trajectories.
    pub tau_joint: Option<f64>,
    pub tau_s: Option<f64>,
    pub tau_twin: Option<f64>,
    /// Steps (over both trajectories) whose direction was exactly zero.
    pub zero_direction_steps: usize,
    /// Steps whose mini-batch contained the replaced sample.
    pub replaced_visits: usize,
    /// Per-step check of
    /// `div_t ≤ (1−ηλ)·div_{t−1} + η·‖sign(c_t) − sign(c_t⁽ⁱ⁾)‖`
    /// (Lion and SignSGD only).
    pub recursion_checked: usize,
    pub recursion_violations: usize,
    pub branch_fraction: Option<f64>,
    pub resolved_optimizer: OptimizerConfig,
}

fn resolve(spec: &TwinRunSpec, problem: &Problem, train: &Dataset) -> Result<OptimizerConfig> {
    spec.optimizer.validate()?;
    let dim = problem.dim();
    let g_hat = problem.lipschitz_g(train).map(|g| schedule::g_hat(g, dim));
    let cfg = apply_schedule(&spec.schedule, spec.steps, dim, &spec.optimizer, g_hat)?;
    check_decay(&cfg, spec.allow_zero_lambda)?;
    if cfg.lambda * cfg.eta >= 1.0 {
        return Err(Error::config("lambda * eta must be < 1"));
    }
    Ok(cfg)
}

pub fn validate(spec: &TwinRunSpec) -> Result<()> {
    if spec.steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    if spec.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if spec.replace_index >= spec.data.n {
        return Err(Error::IndexOutOfRange { index: spec.replace_index, len: spec.data.n });
    }
    let problem = Problem::from_config(&spec.problem, &spec.data)?;
    resolve(spec, &problem, &spec.data.build()?).map(|_| ())
}

/// Runs both trajectories in lockstep.
pub fn twin_run(spec: &TwinRunSpec) -> Result<StabilityReport> {
    validate(spec)?;
    let problem = Problem::from_config(&spec.problem, &spec.data)?;
    let train = spec.data.build()?;
    let twin = replace_sample(&train, spec.replace_index, spec.replacement_seed)?;
    let cfg = resolve(spec, &problem, &train)?;
    let dim = problem.dim();

    let w0 = init_params(dim, spec.init_seed, spec.init_scale)?;
    let (mut w, mut w2) = (w0.clone(), w0);
    let mut state = optim::make_state(&cfg, dim)?;
    let mut state2 = state.clone();

    let mut div = vec![0.0];
    let mut mdiv = vec![0.0];
    let (mut tau_s, mut tau_twin): (Option<f64>, Option<f64>) = (None, None);
    let mut zero_dirs = 0;
    let mut visits = 0;
    let (mut rec_checked, mut rec_violations) = (0, 0);
    let (mut sign_steps, mut branch_steps) = (0usize, 0usize);
    let check_recursion = matches!(cfg.method, Method::Lion | Method::SignSgd);

    for t in 1..=spec.steps {
        let idx = step_indices(spec.index_seed, train.len(), t, spec.batch_size);
        if idx.contains(&spec.replace_index) {
            visits += 1;
        }
        let abort = |reason: &str, w: &crate::ParamVector| Error::Aborted {
            step: t,
            reason: reason.to_string(),
            last_good: w.to_f64(),
        };
        let g = batch_grad(&problem, &w, &train, &idx).map_err(|_| abort("non-finite gradient", &w))?;
        let g2 = batch_grad(&problem, &w2, &twin, &idx).map_err(|_| abort("non-finite gradient", &w2))?;
        let a = optim::step(&w, &g, &state, &cfg).map_err(|_| abort("non-finite parameter", &w))?;
        let b = optim::step(&w2, &g2, &state2, &cfg).map_err(|_| abort("non-finite parameter", &w2))?;

        for (s, tau) in [(&a, &mut tau_s), (&b, &mut tau_twin)] {
            if let Some(d) = &s.dir {
                match min_abs_nonzero(&d.c) {
                    Some(q) => *tau = Some(tau.map_or(q, |m: f64| m.min(q))),
                    None => zero_dirs += 1,
                }
            }
            match s.state.branch_taken {
                optim::Branch::Sign => {
                    sign_steps += 1;
                    branch_steps += 1;
                }
                optim::Branch::Identity => branch_steps += 1,
                optim::Branch::NotApplicable => {}
            }
        }

        let d = distance(&a.w, &b.w, NormKind::L2)?;
        if check_recursion {
            if let (Some(da), Some(db)) = (&a.dir, &b.dir) {
                let flip = distance(&sign_vec(&da.c), &sign_vec(&db.c), NormKind::L2)?;
                let prev = div[t - 1];
                let rhs = (1.0 - cfg.eta * cfg.lambda) * prev + cfg.eta * flip;
                rec_checked += 1;
                if d > rhs + RECURSION_SLACK * (1.0 + prev + rhs) {
                    rec_violations += 1;
                }
            }
        }
        div.push(d);
        mdiv.push(distance(&a.state.m, &b.state.m, NormKind::L2)?);
        w = a.w;
        w2 = b.w;
        state = a.state;
        state2 = b.state;
    }

    let test = spec.data.build_test(&train)?;
    let gap = gap_estimate(&problem, &w, &train, &test)?;
    let tau_joint = match (tau_s, tau_twin) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    };
    Ok(StabilityReport {
        final_divergence: *div.last().expect("non-empty"),
        divergence_curve: div,
        momentum_divergence: mdiv,
        gap,
        tau_joint,
        tau_s,
        tau_twin,
        zero_direction_steps: zero_dirs,
        replaced_visits: visits,
        recursion_checked: rec_checked,
        recursion_violations: rec_violations,
        branch_fraction: (branch_steps > 0).then(|| sign_steps as f64 / branch_steps as f64),
        resolved_optimizer: cfg,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: TwinRunSpec,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    20
}

/// Replicate `r` at size `n`: fresh dataset seed, index seed, replaced
/// index, and replacement draw, all derived from the base spec. The same
/// `r` uses the same seeds at every `n`.
pub fn replicate_spec(base: &TwinRunSpec, n: usize, r: usize) -> TwinRunSpec {
    let tag = r as u64;
    let mut s = base.clone();
    s.data.n = n;
    s.data.seed = derive_seed(base.data.seed, tag);
    s.index_seed = derive_seed(base.index_seed, tag);
    s.init_seed = derive_seed(base.init_seed, tag);
    s.replacement_seed = derive_seed(base.replacement_seed, tag);
    s.replace_index = CounterRng::new(s.replacement_seed, Stream::Replacement).below(n);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub n: usize,
    pub mean_divergence: f64,
    pub divergence_stderr: f64,
    pub mean_gap: f64,
    pub mean_visits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub method: Method,
    pub replicates: usize,
    pub points: Vec<SweepPoint>,
    /// Least-squares slope of `log(mean divergence)` against `log N`.
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub intercept: Option<f64>,
    /// `ok`, or why no slope was fitted.
    pub status: String,
    /// Smallest `τ` over every trajectory of the sweep.
    pub tau_joint: Option<f64>,
}

/// Ordinary least squares `y = a + b·x`; returns `(b, stderr(b), a)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = if x.len() > 2 { (ssr / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    (slope, stderr, intercept)
}

pub fn stability_sweep(spec: &SweepSpec, threads: Option<usize>) -> Result<SweepReport> {
    if spec.n_grid.len() < 4 {
        return Err(Error::config("need ≥4 N values for slope fit"));
    }
    if spec.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("n_grid must be strictly increasing"));
    }
    if spec.replicates < 10 {
        return Err(Error::config("replicates must be at least 10"));
    }
    for &n in &spec.n_grid {
        validate(&replicate_spec(&spec.base, n, 0))?;
    }
    let jobs: Vec<(usize, usize)> =
        spec.n_grid.iter().flat_map(|&n| (0..spec.replicates).map(move |r| (n, r))).collect();
    let reports = par_map(threads, jobs, |(n, r)| twin_run(&replicate_spec(&spec.base, n, r)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::new();
    let mut tau_joint: Option<f64> = None;
    for (k, &n) in spec.n_grid.iter().enumerate() {
        let reps = &reports[k * spec.replicates..(k + 1) * spec.replicates];
        let m = reps.len() as f64;
        let divs: Vec<f64> = reps.iter().map(|r| r.final_divergence).collect();
        let mean = divs.iter().sum::<f64>() / m;
        let var = divs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
        for r in reps {
            if let Some(t) = r.tau_joint {
                tau_joint = Some(tau_joint.map_or(t, |x| x.min(t)));
            }
        }
        points.push(SweepPoint {
            n,
            mean_divergence: mean,
            divergence_stderr: (var / m).sqrt(),
            mean_gap: reps.iter().map(|r| r.gap.gap).sum::<f64>() / m,
            mean_visits: reps.iter().map(|r| r.replaced_visits as f64).sum::<f64>() / m,
        });
    }

    let (slope, slope_stderr, intercept, status) = if points.iter().all(|p| p.mean_divergence == 0.0) {
        (None, None, None, "no divergence observed".to_string())
    } else if points.iter().any(|p| p.mean_divergence == 0.0) {
        (None, None, None, "zero mean divergence at some N; slope not fitted".to_string())
    } else {
        let x: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
        let y: Vec<f64> = points.iter().map(|p| p.mean_divergence.ln()).collect();
        let (b, se, a) = fit_line(&x, &y);
        (Some(b), Some(se), Some(a), "ok".to_string())
    };
    Ok(SweepReport {
        method: spec.base.optimizer.method,
        replicates: spec.replicates,
        points,
        slope,
        slope_stderr,
        intercept,
        status,
        tau_joint,
    })
}

/// Config for the `stability` command: a single twin run, or a sweep over
/// `n_grid` when one is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub twin: TwinRunSpec,
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl StabilityConfig {
    pub fn sweep(&self) -> Option<SweepSpec> {
        self.n_grid.as_ref().map(|n_grid| SweepSpec {
            base: self.twin.clone(),
            n_grid: n_grid.clone(),
            replicates: self.replicates,
        })
    }
}

/// The fixed small-`τ` instance: a quadratic whose first target coordinate
/// alternates in sign across samples so that coordinate of the gradient
/// hovers near zero around the optimum.
pub fn adversarial_instance(method: Method, seed: u64) -> TwinRunSpec {
    let n = 40;
    let mut optimizer = OptimizerConfig::new(method, 0.05);
    optimizer.beta1 = 0.9;
    optimizer.beta2 = 0.99;
    optimizer.lambda = 0.01;
    optimizer.nu = 0.5;
    let base = TwinRunSpec {
        problem: ProblemConfig { kind: crate::problems::ProblemKind::Quadratic, classes: 2 },
        data: DataConfig {
            generator: crate::problems::Generator::NearCancel,
            n,
            dim: 8,
            seed: ADVERSARIAL_DATA_SEED,
            test_multiplier: 10,
        },
        optimizer,
        steps: 400,
        replace_index: 0,
        replacement_seed: 0,
        index_seed: 0,
        init_seed: 0,
        init_scale: 0.0,
        batch_size: 1,
        schedule: Schedule::Constant,
        allow_zero_lambda: false,
    };
    let mut spec = replicate_spec(&base, n, seed as usize);
    spec.data.seed = ADVERSARIAL_DATA_SEED;
    spec
}

pub const ADVERSARIAL_DATA_SEED: u64 = 20240;

pub fn divergence_table(report: &StabilityReport) -> CsvTable {
    let mut table = CsvTable::new(["t", "divergence", "momentum_divergence"]);
    for (t, (d, m)) in report.divergence_curve.iter().zip(&report.momentum_divergence).enumerate() {
        table.push(vec![t.to_string(), cell(Some(*d)), cell(Some(*m))]);
    }
    table
}

pub fn sweep_table(report: &SweepReport) -> CsvTable {
    let mut table = CsvTable::new(["n", "mean_divergence", "divergence_stderr", "mean_gap", "mean_visits"]);
    for p in &report.points {
        table.push(vec![
            p.n.to_string(),
            cell(Some(p.mean_divergence)),
            cell(Some(p.divergence_stderr)),
            cell(Some(p.mean_gap)),
            cell(Some(p.mean_visits)),
        ]);
    }
    table
}

/// Writes `twin-<hash>.csv` (divergence curve) and `twin-<hash>.json`.
pub fn write_twin(dir: &Path, spec: &TwinRunSpec, report: &StabilityReport) -> Result<Vec<PathBuf>> {
    let hash = config_hash(spec);
    let csv = dir.join(format!("twin-{hash}.csv"));
    let json = dir.join(format!("twin-{hash}.json"));
    divergence_table(report).write(&csv, &hash)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        spec: &'a TwinRunSpec,
        final_divergence: f64,
        gap: GapEstimate,
        tau_joint: Option<f64>,
        tau_s: Option<f64>,
        tau_twin: Option<f64>,
        zero_direction_steps: usize,
        replaced_visits: usize,
        recursion_checked: usize,
        recursion_violations: usize,
        branch_fraction: Option<f64>,
        resolved_optimizer: &'a OptimizerConfig,
    }
    let summary = Summary {
        spec,
        final_divergence: report.final_divergence,
        gap: report.gap,
        tau_joint: report.tau_joint,
        tau_s: report.tau_s,
        tau_twin: report.tau_twin,
        zero_direction_steps: report.zero_direction_steps,
        replaced_visits: report.replaced_visits,
        recursion_checked: report.recursion_checked,
        recursion_violations: report.recursion_violations,
        branch_fraction: report.branch_fraction,
        resolved_optimizer: &report.resolved_optimizer,
    };
    write_json(&json, &summary, &hash)?;
    Ok(vec![csv, json])
}

/// Writes `sweep-<hash>.csv` (per-N means) and `sweep-<hash>.json`.
pub fn write_sweep(dir: &Path, spec: &SweepSpec, report: &SweepReport) -> Result<Vec<PathBuf>> {
    let hash = config_hash(spec);
    let csv = dir.join(format!("sweep-{hash}.csv"));
    let json = dir.join(format!("sweep-{hash}.json"));
    sweep_table(report).write(&csv, &hash)?;
    write_json(&json, &serde_json::json!({ "spec": spec, "report": report }), &hash)?;
    Ok(vec![csv, json])
}
