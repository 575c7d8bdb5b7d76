use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{init_params, prepare_run, record_trajectory, RunConfig};
use crate::diagnostics::{diagnose, gradient_bound, DiagnoseInputs, DiagnosticsReport, Lemma3Constants};
use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::output::{cell, config_hash, write_json, CsvTable};
use crate::problems::{gradient_variance, replace_sample};
use crate::rng::derive_seed;
use crate::schedule::default_schedule_alpha;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinSpec {
    /// 0-based index of the replaced training sample.
    pub replace_index: usize,
    #[serde(default)]
    pub replacement_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub run: RunConfig,
    /// Trajectories averaged by the tracking-error check (fresh index and
    /// init seeds, same data).
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Enables the sign-Lipschitz check on a twin trajectory.
    #[serde(default)]
    pub twin: Option<TwinSpec>,
    /// Noise level `σ`; estimated when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Smoothness `L`; taken from the problem when it has a closed form.
    #[serde(default)]
    pub smoothness: Option<f64>,
    #[serde(default = "default_schedule_alpha")]
    pub schedule_alpha: f64,
}

fn default_replicates() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnoseOutput {
    pub report: DiagnosticsReport,
    /// Whether `σ` was declared or estimated as the largest per-sample
    /// gradient standard deviation over ten checkpoints of the trajectory.
    pub sigma: f64,
    pub sigma_source: &'static str,
    pub smoothness: Option<f64>,
}

/// Captures the configured trajectory (plus replicates and an optional twin)
/// and runs every diagnostic on it.
pub fn diagnose_run(cfg: &DiagnoseConfig, threads: Option<usize>) -> Result<DiagnoseOutput> {
    if cfg.replicates == 0 {
        return Err(Error::config("replicates must be at least 1"));
    }
    let run = &cfg.run;
    let prepared = prepare_run(run)?;
    let (problem, train, opt) = (&prepared.problem, &prepared.train, &prepared.optimizer);
    let dim = problem.dim();

    let capture = |init_seed: u64, index_seed: u64, ds: &crate::problems::Dataset| {
        let w0 = init_params(dim, init_seed, run.init_scale)?;
        record_trajectory(problem, ds, opt, w0, run.steps, run.batch_size, index_seed)
    };
    let mut traj = capture(run.seeds.init_seed, run.seeds.index_seed, train)?;
    traj.declared_g = run.declared_g;
    traj.declared_l = cfg.smoothness;

    let reps: Vec<_> = par_map(threads, (0..cfg.replicates).collect(), |r| {
        if r == 0 {
            return Ok(traj.clone());
        }
        let tag = r as u64;
        capture(derive_seed(run.seeds.init_seed, tag), derive_seed(run.seeds.index_seed, tag), train)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let twin = match &cfg.twin {
        Some(t) => {
            let other = replace_sample(train, t.replace_index, t.replacement_seed)?;
            Some(capture(run.seeds.init_seed, run.seeds.index_seed, &other)?)
        }
        None => None,
    };

    let (sigma, sigma_source) = match cfg.sigma {
        Some(s) => (s, "declared"),
        None => {
            let mut worst = 0.0f64;
            for k in 0..=10 {
                let t = k * traj.len() / 10;
                worst = worst.max(gradient_variance(problem, traj.iterate(t), train)?);
            }
            (worst.sqrt(), "empirical")
        }
    };
    let smoothness = cfg.smoothness.or_else(|| problem.smooth_l(train));
    let (g, _) = gradient_bound(&traj);
    let constants = Lemma3Constants { sigma: Some(sigma), g: Some(g), l: smoothness, ..Default::default() };
    let report = diagnose(
        &traj,
        problem,
        train,
        DiagnoseInputs { twin: twin.as_ref(), replicates: &reps, constants, schedule_alpha: cfg.schedule_alpha },
    )?;
    Ok(DiagnoseOutput { report, sigma, sigma_source, smoothness })
}

/// Writes `diagnose-<hash>.json` and `diagnose-<hash>-l1.csv` (running
/// average of the ℓ₁ gradient norm).
pub fn write_diagnose(dir: &Path, cfg: &DiagnoseConfig, out: &DiagnoseOutput) -> Result<Vec<PathBuf>> {
    let hash = config_hash(cfg);
    let json = dir.join(format!("diagnose-{hash}.json"));
    let csv = dir.join(format!("diagnose-{hash}-l1.csv"));
    write_json(&json, &serde_json::json!({ "config": cfg, "diagnostics": out }), &hash)?;
    let mut table = CsvTable::new(["t", "avg_l1_grad"]);
    for (t, v) in out.report.avg_l1_grad.iter().enumerate() {
        table.push(vec![(t + 1).to_string(), cell(Some(*v))]);
    }
    table.write(&csv, &hash)?;
    Ok(vec![json, csv])
}
