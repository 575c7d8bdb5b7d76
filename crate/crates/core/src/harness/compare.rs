use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{grid_search, GridReport, GridSpec, Metric};
use super::{run, RunConfig, RunRow};
use crate::error::{Error, Result};
use crate::optim::Method;
use crate::output::{cell, config_hash, write_json, CsvTable};
use crate::problems::{DataConfig, ProblemConfig};
use crate::rng::derive_seed;
use crate::schedule::Schedule;
use crate::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    pub label: String,
    pub optimizer: OptimizerConfig,
    /// Defaults to the base schedule.
    #[serde(default)]
    pub schedule: Option<Schedule>,
    /// Must equal the base problem when given.
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    /// Must equal the base data when given.
    #[serde(default)]
    pub data: Option<DataConfig>,
    /// Per-optimizer grid; empty runs the entry as given.
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    /// Shared problem, data, horizon, seeds, and cadence. Its optimizer is
    /// replaced by each entry's.
    pub base: RunConfig,
    pub entries: Vec<CompareEntry>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "one")]
    pub replicates: usize,
    /// Gives each entry its own dataset, init, and index seeds instead of
    /// sharing the base seeds.
    #[serde(default)]
    pub decouple_seeds: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub method: Method,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub avg_l1_grad: f64,
    pub wall_time_s: f64,
    /// CLion threshold.
    pub nu: Option<f64>,
    pub branch_fraction: Option<f64>,
    /// Winning axis values, `path=value` joined by `;`.
    pub selected: String,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub metric: Metric,
    pub rows: Vec<CompareRow>,
    /// Label of the row with the smallest metric.
    pub best: String,
    /// Recorded steps, shared by every entry.
    pub steps: Vec<usize>,
    #[serde(skip)]
    pub curves: Vec<Vec<RunRow>>,
    pub grids: Vec<Option<GridReport>>,
}

fn entry_config(spec: &CompareSpec, k: usize) -> Result<RunConfig> {
    let e = &spec.entries[k];
    let base = &spec.base;
    if e.problem.as_ref().is_some_and(|p| p != &base.problem) || e.data.as_ref().is_some_and(|d| d != &base.data) {
        return Err(Error::config(format!(
            "compare entry '{}' uses a different problem or dataset; entries must share one",
            e.label
        )));
    }
    let mut cfg = RunConfig {
        optimizer: e.optimizer.clone(),
        schedule: e.schedule.clone().unwrap_or_else(|| base.schedule.clone()),
        ..base.clone()
    };
    if spec.decouple_seeds {
        let tag = k as u64 + 1;
        cfg.data.seed = derive_seed(base.data.seed, tag);
        cfg.seeds.init_seed = derive_seed(base.seeds.init_seed, tag);
        cfg.seeds.index_seed = derive_seed(base.seeds.index_seed, tag);
    }
    Ok(cfg)
}

/// Runs every entry (grid-searching its axes when given) on the shared setup
/// and tabulates the winners.
pub fn compare(spec: &CompareSpec, threads: Option<usize>) -> Result<CompareReport> {
    if spec.entries.len() < 2 {
        return Err(Error::config("compare needs at least 2 entries"));
    }
    let mut labels: Vec<&str> = spec.entries.iter().map(|e| e.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("compare entry labels must be unique"));
    }
    let configs = (0..spec.entries.len()).map(|k| entry_config(spec, k)).collect::<Result<Vec<_>>>()?;
    for (cfg, e) in configs.iter().zip(&spec.entries) {
        super::validate(cfg).map_err(|err| Error::config(format!("compare entry '{}': {err}", e.label)))?;
    }

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut grids = Vec::new();
    for (cfg, e) in configs.into_iter().zip(&spec.entries) {
        let (chosen, grid) = if e.axes.is_empty() {
            (cfg, None)
        } else {
            let gs = GridSpec { base: cfg, axes: e.axes.clone(), metric: spec.metric, replicates: spec.replicates };
            let report = grid_search(&gs, threads).map_err(|err| match err {
                Error::AllAborted(t) => Error::AllAborted(format!("entry '{}':\n{t}", e.label)),
                other => other,
            })?;
            (report.best_config.clone(), Some(report))
        };
        let log = run(&chosen)?;
        let selected = grid.as_ref().map_or(String::new(), |g| {
            g.axes.iter().zip(&g.best().values).map(|(a, v)| format!("{a}={v}")).collect::<Vec<_>>().join(";")
        });
        let opt = log.summary.resolved_optimizer.clone();
        rows.push(CompareRow {
            label: e.label.clone(),
            method: opt.method,
            final_train_loss: log.summary.final_train_loss,
            final_test_loss: log.summary.final_test_loss,
            avg_l1_grad: log.summary.avg_l1_grad,
            wall_time_s: log.wall_time_s,
            nu: (opt.method == Method::CLion).then_some(opt.nu),
            branch_fraction: log.summary.branch_fraction,
            selected,
            optimizer: opt,
        });
        curves.push(log.rows);
        grids.push(grid);
    }
    let metric_of = |r: &CompareRow| match spec.metric {
        Metric::FinalTestLoss => r.final_test_loss,
        Metric::FinalTrainLoss => r.final_train_loss,
    };
    let best = rows.iter().min_by(|a, b| metric_of(a).total_cmp(&metric_of(b))).expect("entries").label.clone();
    let steps = curves[0].iter().map(|r| r.t).collect();
    Ok(CompareReport { metric: spec.metric, rows, best, steps, curves, grids })
}

pub const COMPARE_HEADER: [&str; 10] = [
    "label",
    "method",
    "final_train_loss",
    "final_test_loss",
    "avg_l1_grad",
    "wall_time_s",
    "nu",
    "branch_fraction",
    "selected",
    "gap_to_best",
];

pub fn compare_table(report: &CompareReport) -> CsvTable {
    let metric_of = |r: &CompareRow| match report.metric {
        Metric::FinalTestLoss => r.final_test_loss,
        Metric::FinalTrainLoss => r.final_train_loss,
    };
    let best = report.rows.iter().map(metric_of).fold(f64::INFINITY, f64::min);
    let mut table = CsvTable::new(COMPARE_HEADER);
    for r in &report.rows {
        table.push(vec![
            r.label.clone(),
            r.method.name().to_string(),
            cell(Some(r.final_train_loss)),
            cell(Some(r.final_test_loss)),
            cell(Some(r.avg_l1_grad)),
            cell(Some(r.wall_time_s)),
            cell(r.nu),
            cell(r.branch_fraction),
            r.selected.clone(),
            cell(Some((metric_of(r) - best) / best.abs())),
        ]);
    }
    table
}

/// Long-format curves: one row per (label, recorded step).
pub fn curves_table(report: &CompareReport) -> CsvTable {
    let mut table = CsvTable::new(["label", "t", "train_loss", "test_loss", "grad_l1", "w_norm"]);
    for (row, curve) in report.rows.iter().zip(&report.curves) {
        for r in curve {
            table.push(vec![
                row.label.clone(),
                r.t.to_string(),
                cell(Some(r.train_loss)),
                cell(Some(r.test_loss)),
                cell(Some(r.grad_l1)),
                cell(Some(r.w_norm)),
            ]);
        }
    }
    table
}

/// Writes `compare-<hash>.csv`, `compare-<hash>-curves.csv`, and
/// `compare-<hash>.json`.
pub fn write_compare(dir: &Path, spec: &CompareSpec, report: &CompareReport) -> Result<Vec<PathBuf>> {
    let hash = config_hash(spec);
    let table = dir.join(format!("compare-{hash}.csv"));
    let curves = dir.join(format!("compare-{hash}-curves.csv"));
    let json = dir.join(format!("compare-{hash}.json"));
    compare_table(report).write(&table, &hash)?;
    curves_table(report).write(&curves, &hash)?;
    write_json(&json, &serde_json::json!({ "spec": spec, "report": report }), &hash)?;
    Ok(vec![table, curves, json])
}
