use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use clion_core::config::{apply_overrides, load, parse_override};
use clion_core::harness::{self, CompareSpec, DiagnoseConfig, GridSpec, RunConfig};
use clion_core::output::resolve_out_dir;
use clion_core::stability::{self, StabilityConfig};
use clion_core::Error;

/// Lion / CLion optimizer experiments on synthetic problems.
#[derive(Parser)]
#[command(name = "clion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write the per-step log.
    Run(Common),
    /// Grid-search config fields and write the full results table.
    Grid(Common),
    /// Twin-trajectory divergence for one run, or a sweep over N.
    Stability(Common),
    /// Check the sign-method inequalities along a captured trajectory.
    Diagnose(Common),
    /// Run several optimizers on one problem and tabulate them.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    config: PathBuf,
    /// Output directory (default: $CLION_OUT_DIR, else ./out).
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    /// Override a config field, e.g. `--set optimizer.eta=0.01`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for grids, sweeps, and replicates (default: $CLION_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, conflicts_with = "quiet")]
    verbose: u8,
    /// Errors only.
    #[arg(short, long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Run(c) | Command::Grid(c) | Command::Stability(c) | Command::Diagnose(c) | Command::Compare(c) => c,
    };
    let level = match (common.quiet, common.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Grid(c) => cmd_grid(c),
        Command::Stability(c) => cmd_stability(c),
        Command::Diagnose(c) => cmd_diagnose(c),
        Command::Compare(c) => cmd_compare(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_config<T: Serialize + DeserializeOwned>(c: &Common) -> Result<T, Error> {
    let cfg: T = load(&c.config)?;
    let overrides = c.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    apply_overrides(&cfg, &overrides)
}

fn out_dir(c: &Common) -> PathBuf {
    resolve_out_dir(c.out_dir.as_deref())
}

fn report_files(files: &[PathBuf]) {
    for f in files {
        log::info!("wrote {}", f.display());
    }
}

fn cmd_run(c: &Common) -> Result<(), Error> {
    let cfg: RunConfig = load_config(c)?;
    let dir = out_dir(c);
    let log = match harness::run(&cfg) {
        Ok(log) => log,
        Err(Error::Aborted { step, reason, last_good }) => {
            let snapshot = dir.join(format!("{}-aborted.json", harness::run_stem(&cfg)));
            let body = serde_json::json!({ "step": step, "reason": reason, "last_good": last_good });
            clion_core::output::write_json(&snapshot, &body, &cfg.hash())?;
            return Err(Error::Aborted { step, reason, last_good });
        }
        Err(e) => return Err(e),
    };
    let files = harness::write_run_log(&dir, &cfg, &log)?;
    report_files(&files);
    let s = &log.summary;
    println!(
        "{} T={} train_loss={} test_loss={} avg_l1_grad={} -> {}",
        s.method,
        s.steps,
        s.final_train_loss,
        s.final_test_loss,
        s.avg_l1_grad,
        files[0].display()
    );
    Ok(())
}

fn cmd_grid(c: &Common) -> Result<(), Error> {
    let spec: GridSpec = load_config(c)?;
    let report = harness::grid_search(&spec, c.threads)?;
    let files = harness::write_grid(&out_dir(c), &spec, &report)?;
    report_files(&files);
    let best = report.best();
    let aborted = report.cells.iter().filter(|r| r.aborted.is_some()).count();
    println!(
        "{} cells ({aborted} aborted), best cell {} {}={} -> {}",
        report.total_cells,
        best.cell,
        report.metric.name(),
        best.metric.unwrap_or(f64::NAN),
        files[0].display()
    );
    Ok(())
}

fn cmd_stability(c: &Common) -> Result<(), Error> {
    let cfg: StabilityConfig = load_config(c)?;
    let dir = out_dir(c);
    match cfg.sweep() {
        Some(spec) => {
            let report = stability::stability_sweep(&spec, c.threads)?;
            let files = stability::write_sweep(&dir, &spec, &report)?;
            report_files(&files);
            match (report.slope, report.slope_stderr) {
                (Some(s), Some(se)) => println!("slope={s} stderr={se} -> {}", files[0].display()),
                _ => println!("{} -> {}", report.status, files[0].display()),
            }
        }
        None => {
            let report = stability::twin_run(&cfg.twin)?;
            let files = stability::write_twin(&dir, &cfg.twin, &report)?;
            report_files(&files);
            println!(
                "final_divergence={} visits={} gap={} -> {}",
                report.final_divergence,
                report.replaced_visits,
                report.gap.gap,
                files[0].display()
            );
        }
    }
    Ok(())
}

fn cmd_diagnose(c: &Common) -> Result<(), Error> {
    let cfg: DiagnoseConfig = load_config(c)?;
    let out = harness::diagnose_run(&cfg, c.threads)?;
    let files = harness::write_diagnose(&out_dir(c), &cfg, &out)?;
    report_files(&files);
    let r = &out.report;
    let tracking = match &r.lemma3 {
        Some(l) => format!("{:.4}<={:.4}:{}", l.lhs, l.rhs, l.ok),
        None => "n/a".into(),
    };
    println!(
        "sign_lipschitz_violations={} iterate_bound_violations={} sign_correlation_violations={} tracking={} -> {}",
        r.lemma1.violations,
        r.lemma2.violations(),
        r.lemma_c1.violations,
        tracking,
        files[0].display()
    );
    Ok(())
}

fn cmd_compare(c: &Common) -> Result<(), Error> {
    let spec: CompareSpec = load_config(c)?;
    let report = harness::compare(&spec, c.threads)?;
    let files = harness::write_compare(&out_dir(c), &spec, &report)?;
    report_files(&files);
    println!("{} entries, best {} -> {}", report.rows.len(), report.best, files[0].display());
    Ok(())
}
