//! Experiment orchestration: run configs, the training loop, grids,
//! optimizer comparisons, and diagnostics runs.
//!
//! A run is a pure function of its [`RunConfig`]. Sample indices come from
//! the counter-based index stream (see [`crate::rng`]): step `t` (1-based)
//! with batch size `B` uses draws `k = (t−1)·B .. t·B`, each mapped to
//! `[0, N)` by `index_at(index_seed, N, k)`.

mod compare;
mod diagnose;
mod grid;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use compare::{compare, write_compare, CompareEntry, CompareReport, CompareRow, CompareSpec, COMPARE_HEADER};
pub use diagnose::{diagnose_run, write_diagnose, DiagnoseConfig, DiagnoseOutput, TwinSpec};
pub use grid::{grid_search, write_grid, CellResult, GridReport, GridSpec, Metric};

use crate::diagnostics::{Trajectory, TrajectoryStep};
use crate::error::{Error, Result};
use crate::optim::{self, Branch, Method};
use crate::output::{cell, config_hash, write_json, CsvTable};
use crate::problems::{batch_grad, empirical_risk, full_grad, DataConfig, Dataset, Problem, ProblemConfig};
use crate::rng::{index_at, CounterRng, Stream};
use crate::schedule::{self, apply_schedule, Schedule};
use crate::vecmath::{min_abs_nonzero, norm, NormKind};
use crate::{OptimizerConfig, OptimizerState, ParamVector, Step};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub index_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// Recording and test-evaluation cadence; defaults to 1% of `steps`.
    #[serde(default)]
    pub record_every: Option<usize>,
    #[serde(default)]
    pub seeds: Seeds,
    /// Standard deviation of the Gaussian initialization; 0 starts at the origin.
    #[serde(default)]
    pub init_scale: f64,
    /// Bound on per-sample gradient norms. When absent, problems with a
    /// closed-form bound use it.
    #[serde(default)]
    pub declared_g: Option<f64>,
    /// Permits CLion with `λ = 0`.
    #[serde(default)]
    pub allow_zero_lambda: bool,
    /// Evaluates `‖∇F_S(w_t)‖₁` at every step rather than only at recorded
    /// steps, making `avg_l1_grad` the exact running average.
    #[serde(default)]
    pub l1_every_step: bool,
    /// Keeps every step's iterate, direction, and momentum in the log.
    #[serde(default)]
    pub capture_trajectory: bool,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn new(problem: ProblemConfig, data: DataConfig, optimizer: OptimizerConfig, steps: usize) -> Self {
        Self {
            problem,
            data,
            optimizer,
            steps,
            batch_size: 1,
            schedule: Schedule::Constant,
            record_every: None,
            seeds: Seeds::default(),
            init_scale: 0.0,
            declared_g: None,
            allow_zero_lambda: false,
            l1_every_step: false,
            capture_trajectory: false,
        }
    }

    pub fn record_every(&self) -> usize {
        self.record_every.unwrap_or((self.steps / 100).max(1))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Problem, data, and the optimizer config with its schedule resolved.
pub struct Prepared {
    pub problem: Problem,
    pub train: Dataset,
    pub optimizer: OptimizerConfig,
    /// `Ĝ = max(G, √d)` when a gradient bound is known.
    pub g_hat: Option<f64>,
}

/// Resolves the schedule and checks the rules that go beyond per-field
/// validation:
/// * Lion and CLion need `λ·η < 1`;
/// * CLion needs `λ > 0` unless `allow_zero_lambda` is set.
///
/// `λ` above `1/(2ηĜT^α)` is allowed; [`run`] logs a warning for it.
pub fn prepare(
    problem: &ProblemConfig,
    data: &DataConfig,
    optimizer: &OptimizerConfig,
    schedule: &Schedule,
    steps: usize,
    declared_g: Option<f64>,
    allow_zero_lambda: bool,
) -> Result<Prepared> {
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    if data.n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    optimizer.validate()?;
    let problem = Problem::from_config(problem, data)?;
    let train = data.build()?;
    let dim = problem.dim();
    let g = declared_g.or_else(|| problem.lipschitz_g(&train));
    let g_hat = g.map(|g| schedule::g_hat(g, dim));
    let optimizer = apply_schedule(schedule, steps, dim, optimizer, g_hat)?;
    check_decay(&optimizer, allow_zero_lambda)?;
    Ok(Prepared { problem, train, optimizer, g_hat })
}

fn warn_about_decay(p: &Prepared, steps: usize) {
    if p.optimizer.method == Method::CLion && p.optimizer.lambda == 0.0 {
        log::warn!("running clion with lambda = 0");
    }
    if let Some(g_hat) = p.g_hat {
        let cap = schedule::lambda_cap(p.optimizer.eta, g_hat, steps, schedule::default_schedule_alpha());
        if p.optimizer.method.is_sign_family() && p.optimizer.lambda > cap {
            log::warn!(
                "lambda {} exceeds the bounded-iterate cap {cap:.3e}; iterate bounds are not guaranteed",
                p.optimizer.lambda
            );
        }
    }
}

pub(crate) fn check_decay(cfg: &OptimizerConfig, allow_zero_lambda: bool) -> Result<()> {
    if matches!(cfg.method, Method::Lion | Method::CLion) && cfg.lambda * cfg.eta >= 1.0 {
        return Err(Error::config("lambda * eta must be < 1"));
    }
    if cfg.method == Method::CLion && cfg.lambda == 0.0 && !allow_zero_lambda {
        return Err(Error::config("clion requires lambda > 0 (set allow_zero_lambda to override)"));
    }
    Ok(())
}

/// `w₀ = init_scale·z`, `z` standard normal from the init stream.
pub fn init_params(dim: usize, init_seed: u64, init_scale: f64) -> Result<ParamVector> {
    if !(init_scale >= 0.0) || !init_scale.is_finite() {
        return Err(Error::config("init_scale must be non-negative"));
    }
    if init_scale == 0.0 {
        return Ok(ParamVector::zeros(dim));
    }
    let mut rng = CounterRng::new(init_seed, Stream::Init);
    ParamVector::new((0..dim).map(|_| init_scale * rng.gaussian()).collect())
}

/// Sample indices of step `t` (1-based).
pub fn step_indices(index_seed: u64, n: usize, t: usize, batch_size: usize) -> Vec<usize> {
    let start = ((t - 1) * batch_size) as u64;
    (0..batch_size as u64).map(|b| index_at(index_seed, n, start + b)).collect()
}

/// What the training loop hands to its observer after each step.
pub struct StepView<'a> {
    pub t: usize,
    pub indices: &'a [usize],
    pub w_prev: &'a ParamVector,
    pub g: &'a ParamVector,
    pub step: &'a Step,
}

/// Runs `steps` optimizer steps from `w0`, calling `observe` after each.
/// Non-finite values abort with the failing step and the last good iterate.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    problem: &Problem,
    ds: &Dataset,
    cfg: &OptimizerConfig,
    w0: ParamVector,
    steps: usize,
    batch_size: usize,
    index_seed: u64,
    mut observe: impl FnMut(&StepView<'_>) -> Result<()>,
) -> Result<(ParamVector, OptimizerState)> {
    let mut w = w0;
    let mut state = optim::make_state(cfg, problem.dim())?;
    for t in 1..=steps {
        let indices = step_indices(index_seed, ds.len(), t, batch_size);
        let abort = |reason: String, w: &ParamVector| Error::Aborted { step: t, reason, last_good: w.to_f64() };
        let g = match batch_grad(problem, &w, ds, &indices) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(abort("non-finite gradient".into(), &w)),
            Err(e) => return Err(e),
        };
        let next = match optim::step(&w, &g, &state, cfg) {
            Ok(s) => s,
            Err(Error::NonFinite { .. }) => return Err(abort("non-finite parameter".into(), &w)),
            Err(e) => return Err(e),
        };
        match observe(&StepView { t, indices: &indices, w_prev: &w, g: &g, step: &next }) {
            Err(Error::NonFinite { .. }) => return Err(abort("non-finite value while recording".into(), &w)),
            other => other?,
        }
        w = next.w;
        state = next.state;
    }
    Ok((w, state))
}

/// Records a full trajectory (iterates, directions, momenta, branches).
pub fn record_trajectory(
    problem: &Problem,
    ds: &Dataset,
    cfg: &OptimizerConfig,
    w0: ParamVector,
    steps: usize,
    batch_size: usize,
    index_seed: u64,
) -> Result<Trajectory> {
    let mut out = Vec::with_capacity(steps);
    let start = w0.clone();
    simulate(problem, ds, cfg, w0, steps, batch_size, index_seed, |v| {
        out.push(trajectory_step(problem, ds, v)?);
        Ok(())
    })?;
    Ok(Trajectory { w0: start, steps: out, config: cfg.clone(), declared_g: None, declared_l: None })
}

fn trajectory_step(problem: &Problem, ds: &Dataset, v: &StepView<'_>) -> Result<TrajectoryStep> {
    let loss = v.indices.iter().map(|&i| problem.loss(v.w_prev, &ds.samples()[i])).sum::<Result<f64>>()?
        / v.indices.len() as f64;
    Ok(TrajectoryStep {
        t: v.t,
        index: v.indices[0],
        w: v.step.w.clone(),
        c: v.step.dir.as_ref().map(|d| d.c.clone()),
        g: v.g.clone(),
        m: v.step.state.m.clone(),
        branch: v.step.state.branch_taken,
        loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub t: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// `‖∇F_S(w_t)‖₁`
    pub grad_l1: f64,
    pub w_norm: f64,
    /// Branch taken by step `t`; `n/a` at `t = 0` and for non-CLion methods.
    pub branch: Branch,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: Method,
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub initial_train_loss: f64,
    /// Mean of `‖∇F_S(w_t)‖₁` over `t = 1..=T` when `l1_every_step` is set,
    /// else over the recorded steps with `t ≥ 1`.
    pub avg_l1_grad: f64,
    pub avg_l1_grad_exact: bool,
    pub final_w_norm: f64,
    /// Fraction of sign-branch steps (CLion only).
    pub branch_fraction: Option<f64>,
    /// Smallest nonzero `|c_j|` over the run.
    pub tau: Option<f64>,
    pub zero_direction_steps: usize,
    /// Optimizer config after schedule resolution.
    pub resolved_optimizer: OptimizerConfig,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
    pub summary: RunSummary,
    pub trajectory: Option<Trajectory>,
    /// Kept out of written files so they stay byte-identical across runs.
    pub wall_time_s: f64,
}

impl RunLog {
    pub fn final_metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::FinalTestLoss => self.summary.final_test_loss,
            Metric::FinalTrainLoss => self.summary.final_train_loss,
        }
    }
}

pub fn validate(cfg: &RunConfig) -> Result<()> {
    prepare_run(cfg).map(|_| ())
}

fn prepare_run(cfg: &RunConfig) -> Result<Prepared> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if cfg.record_every == Some(0) {
        return Err(Error::config("record_every must be at least 1"));
    }
    prepare(&cfg.problem, &cfg.data, &cfg.optimizer, &cfg.schedule, cfg.steps, cfg.declared_g, cfg.allow_zero_lambda)
}

pub fn run(cfg: &RunConfig) -> Result<RunLog> {
    let started = Instant::now();
    let prepared = prepare_run(cfg)?;
    warn_about_decay(&prepared, cfg.steps);
    let Prepared { problem, train, optimizer, .. } = prepared;
    let test = cfg.data.build_test(&train)?;
    let w0 = init_params(problem.dim(), cfg.seeds.init_seed, cfg.init_scale)?;
    let every = cfg.record_every();

    let eval = |t: usize, w: &ParamVector, branch: Branch| -> Result<RunRow> {
        let train_loss = empirical_risk(&problem, w, &train)?;
        let test_loss = empirical_risk(&problem, w, &test)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(Error::Aborted { step: t, reason: "non-finite loss".into(), last_good: w.to_f64() });
        }
        Ok(RunRow {
            t,
            train_loss,
            test_loss,
            grad_l1: norm(&full_grad(&problem, w, &train)?, NormKind::L1),
            w_norm: norm(w, NormKind::L2),
            branch,
        })
    };

    let mut rows = vec![eval(0, &w0, Branch::NotApplicable)?];
    let mut l1_sum = 0.0;
    let (mut sign_steps, mut branch_steps, mut zero_dirs) = (0usize, 0usize, 0usize);
    let mut tau: Option<f64> = None;
    let mut captured = Vec::new();
    let start = w0.clone();
    simulate(&problem, &train, &optimizer, w0, cfg.steps, cfg.batch_size, cfg.seeds.index_seed, |v| {
        let branch = v.step.state.branch_taken;
        match branch {
            Branch::Sign => {
                sign_steps += 1;
                branch_steps += 1
            }
            Branch::Identity => branch_steps += 1,
            Branch::NotApplicable => {}
        }
        if let Some(dir) = &v.step.dir {
            match min_abs_nonzero(&dir.c) {
                Some(q) => tau = Some(tau.map_or(q, |m| m.min(q))),
                None => zero_dirs += 1,
            }
        }
        let w = &v.step.w;
        let recorded = v.t % every == 0 || v.t == cfg.steps;
        if recorded {
            let row = eval(v.t, w, branch)?;
            if !cfg.l1_every_step {
                l1_sum += row.grad_l1;
            }
            rows.push(row);
        }
        if cfg.l1_every_step {
            l1_sum += match rows.last() {
                Some(r) if recorded => r.grad_l1,
                _ => norm(&full_grad(&problem, w, &train)?, NormKind::L1),
            };
        }
        if cfg.capture_trajectory {
            captured.push(trajectory_step(&problem, &train, v)?);
        }
        Ok(())
    })?;

    let last = rows.last().expect("final row recorded");
    let counted = if cfg.l1_every_step { cfg.steps } else { rows.len() - 1 };
    let summary = RunSummary {
        method: optimizer.method,
        steps: cfg.steps,
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        initial_train_loss: rows[0].train_loss,
        avg_l1_grad: l1_sum / counted as f64,
        avg_l1_grad_exact: cfg.l1_every_step,
        final_w_norm: last.w_norm,
        branch_fraction: (branch_steps > 0).then(|| sign_steps as f64 / branch_steps as f64),
        tau,
        zero_direction_steps: zero_dirs,
        resolved_optimizer: optimizer.clone(),
        config_hash: cfg.hash(),
    };
    let trajectory = cfg.capture_trajectory.then_some(Trajectory {
        w0: start,
        steps: captured,
        config: optimizer,
        declared_g: cfg.declared_g,
        declared_l: None,
    });
    Ok(RunLog { rows, summary, trajectory, wall_time_s: started.elapsed().as_secs_f64() })
}

pub const RUN_HEADER: [&str; 6] = ["t", "train_loss", "test_loss", "grad_l1", "w_norm", "branch"];

pub fn run_table(log: &RunLog) -> CsvTable {
    let mut table = CsvTable::new(RUN_HEADER);
    for r in &log.rows {
        table.push(vec![
            r.t.to_string(),
            cell(Some(r.train_loss)),
            cell(Some(r.test_loss)),
            cell(Some(r.grad_l1)),
            cell(Some(r.w_norm)),
            r.branch.as_str().to_string(),
        ]);
    }
    table
}

/// File stem `run-<hash>-i<init_seed>-x<index_seed>`.
pub fn run_stem(cfg: &RunConfig) -> String {
    format!("run-{}-i{}-x{}", cfg.hash(), cfg.seeds.init_seed, cfg.seeds.index_seed)
}

#[derive(Serialize)]
struct RunJson<'a> {
    config: &'a RunConfig,
    summary: &'a RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectory: Option<&'a Trajectory>,
}

/// Writes `<stem>.csv` (rows) and `<stem>.json` (config and summary).
pub fn write_run_log(dir: &Path, cfg: &RunConfig, log: &RunLog) -> Result<Vec<PathBuf>> {
    let hash = cfg.hash();
    let stem = run_stem(cfg);
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    run_table(log).write(&csv, &hash)?;
    write_json(&json, &RunJson { config: cfg, summary: &log.summary, trajectory: log.trajectory.as_ref() }, &hash)?;
    Ok(vec![csv, json])
}
