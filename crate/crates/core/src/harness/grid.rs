use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{run, validate, RunConfig};
use crate::config::apply_values;
use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::output::{cell, config_hash, write_json, CsvTable};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    FinalTestLoss,
    FinalTrainLoss,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::FinalTestLoss => "final_test_loss",
            Metric::FinalTrainLoss => "final_train_loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub base: RunConfig,
    /// Dotted config paths (e.g. `optimizer.eta`) and the values to try.
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub metric: Metric,
    /// Seed replicates per cell; the metric is their mean.
    #[serde(default = "one")]
    pub replicates: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: usize,
    /// Axis values in axis-name order.
    pub values: Vec<f64>,
    /// Mean metric over the replicates that finished; `None` if any aborted.
    pub metric: Option<f64>,
    pub metric_std: Option<f64>,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridReport {
    pub axes: Vec<String>,
    pub metric: Metric,
    pub total_cells: usize,
    pub replicates: usize,
    pub cells: Vec<CellResult>,
    pub best_cell: usize,
    pub best_config: RunConfig,
}

impl GridReport {
    pub fn best(&self) -> &CellResult {
        &self.cells[self.best_cell]
    }
}

/// Cartesian product in axis-name order, last axis varying fastest.
fn cells(axes: &BTreeMap<String, Vec<f64>>) -> Vec<Vec<f64>> {
    axes.values().fold(vec![Vec::new()], |acc, values| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

fn cell_config(base: &RunConfig, names: &[&String], values: &[f64]) -> Result<RunConfig> {
    let assignments: Vec<(String, Value)> =
        names.iter().zip(values).map(|(n, &v)| ((*n).clone(), axis_value(v))).collect();
    apply_values(base, &assignments)
}

/// Integral values become JSON integers so axes can target integer fields.
fn axis_value(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        Value::from(v as i64)
    } else {
        Value::from(v)
    }
}

/// Replicate `r` of a config: replicate 0 is the config itself, later ones
/// derive fresh init and index seeds.
pub(crate) fn replicate(cfg: &RunConfig, r: usize) -> RunConfig {
    let mut c = cfg.clone();
    if r > 0 {
        c.seeds.init_seed = derive_seed(cfg.seeds.init_seed, r as u64);
        c.seeds.index_seed = derive_seed(cfg.seeds.index_seed, r as u64);
    }
    c
}

/// Orders by metric (aborted last), then by axis values lexicographically.
fn rank(a: &CellResult, b: &CellResult) -> Ordering {
    let m = match (a.metric, b.metric) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    m.then_with(|| {
        a.values.iter().zip(&b.values).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

/// Runs every cell and selects the argmin of the metric. Every cell is
/// validated before any runs.
pub fn grid_search(spec: &GridSpec, threads: Option<usize>) -> Result<GridReport> {
    if spec.replicates == 0 {
        return Err(Error::config("replicates must be at least 1"));
    }
    if let Some((name, _)) = spec.axes.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::config(format!("grid axis '{name}' has no values")));
    }
    let names: Vec<&String> = spec.axes.keys().collect();
    let grid = cells(&spec.axes);
    log::info!("grid: {} cells x {} replicates", grid.len(), spec.replicates);

    let configs = grid
        .iter()
        .enumerate()
        .map(|(i, values)| {
            let cfg = cell_config(&spec.base, &names, values)?;
            validate(&cfg).map_err(|e| Error::config(format!("grid cell {i} ({}): {e}", describe(&names, values))))?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> =
        (0..configs.len()).flat_map(|c| (0..spec.replicates).map(move |r| (c, r))).collect();
    let outcomes = par_map(threads, jobs, |(c, r)| match run(&replicate(&configs[c], r)) {
        Ok(log) => Ok(log.final_metric(spec.metric)),
        Err(e @ Error::Aborted { .. }) => Err(e.to_string()),
        Err(e) => Err(format!("failed: {e}")),
    });

    let mut results = Vec::with_capacity(grid.len());
    for (c, values) in grid.into_iter().enumerate() {
        let reps = &outcomes[c * spec.replicates..(c + 1) * spec.replicates];
        let aborted = reps.iter().find_map(|o| o.as_ref().err().cloned());
        let (metric, metric_std) = match aborted {
            Some(_) => (None, None),
            None => {
                let xs: Vec<f64> = reps.iter().map(|o| *o.as_ref().unwrap()).collect();
                let (m, s) = mean_std(&xs);
                (Some(m), s)
            }
        };
        results.push(CellResult { cell: c, values, metric, metric_std, aborted });
    }

    if results.iter().all(|r| r.metric.is_none()) {
        let table = results
            .iter()
            .map(|r| {
                format!("  cell {} ({}): {}", r.cell, describe(&names, &r.values), r.aborted.as_deref().unwrap_or(""))
            })
            .collect::<Vec<_>>()
            .join("\n");
        return Err(Error::AllAborted(table));
    }
    let best = results.iter().min_by(|a, b| rank(a, b)).expect("grid non-empty").cell;
    Ok(GridReport {
        axes: names.iter().map(|s| s.to_string()).collect(),
        metric: spec.metric,
        total_cells: results.len(),
        replicates: spec.replicates,
        best_config: configs[best].clone(),
        cells: results,
        best_cell: best,
    })
}

fn describe(names: &[&String], values: &[f64]) -> String {
    names.iter().zip(values).map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ")
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

pub fn grid_table(report: &GridReport) -> CsvTable {
    let mut header = vec!["cell".to_string()];
    header.extend(report.axes.iter().cloned());
    header.extend([report.metric.name().to_string(), "metric_std".into(), "status".into(), "best".into()]);
    let mut table = CsvTable::new(header);
    for r in &report.cells {
        let mut row = vec![r.cell.to_string()];
        row.extend(r.values.iter().map(|v| v.to_string()));
        row.push(cell(r.metric));
        row.push(cell(r.metric_std));
        row.push(r.aborted.clone().map_or("ok".into(), |e| format!("aborted: {e}")));
        row.push((r.cell == report.best_cell).to_string());
        table.push(row);
    }
    table
}

/// Writes `grid-<hash>.csv` (every cell) and `grid-<hash>.json`.
pub fn write_grid(dir: &Path, spec: &GridSpec, report: &GridReport) -> Result<Vec<PathBuf>> {
    let hash = config_hash(spec);
    let csv = dir.join(format!("grid-{hash}.csv"));
    let json = dir.join(format!("grid-{hash}.json"));
    grid_table(report).write(&csv, &hash)?;
    write_json(&json, &serde_json::json!({ "spec": spec, "report": report }), &hash)?;
    Ok(vec![csv, json])
}
