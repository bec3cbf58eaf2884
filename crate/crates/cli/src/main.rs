//! `rwoa`: validate scenarios, run them, compare the avoidance modes and run
//! the acceptance suite.
//!
//! Exit codes: 0 success, 1 a collision occurred (or an acceptance criterion
//! failed), 2 invalid scenario, 3 runtime error such as a missing file or a
//! non-finite state.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rwoa::acceptance::{run_criterion, CRITERIA};
use rwoa::batch::{self, Execution};
use rwoa::controller::Mode;
use rwoa::scenario::{Scenario, ScenarioError};
use rwoa::sim::{run, RunOutput, TrajectoryLog};

const EXIT_COLLISION: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const MAX_LISTED_VIOLATIONS: usize = 20;

#[derive(Parser)]
#[command(name = "rwoa", version, about = "Whole-body obstacle avoidance simulator for 7-DOF arms")]
struct Cli {
    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list what is wrong with it.
    Validate { scenario: PathBuf },
    /// Simulate one scenario and write its logs.
    Run {
        scenario: PathBuf,
        /// Override the mode named in the scenario.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Files to write. Repeat the flag or separate values with commas.
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["trajectory_csv", "summary"])]
        emit: Vec<Emit>,
    },
    /// Run a scenario in all three modes and tabulate the outcomes.
    Compare {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Per-mode files to write next to `compare.json`.
        #[arg(long, value_enum, value_delimiter = ',')]
        emit: Vec<Emit>,
    },
    /// Run the acceptance criteria, all of them or the listed ids.
    Accept { criteria: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    #[value(name = "trajectory_csv", alias = "trajectory-csv")]
    TrajectoryCsv,
    #[value(name = "summary")]
    Summary,
    /// End-effector path, clearance series and per-obstacle Γ series.
    #[value(name = "plot_data", alias = "plot-data")]
    PlotData,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub collision_count: usize,
    pub min_ee_clearance: f64,
    pub min_link_clearance: f64,
    pub final_target_error: f64,
    pub mean_cycle_seconds: f64,
    pub aborted: Option<String>,
}

impl CompareRow {
    fn from_output(out: &RunOutput) -> Self {
        let s = &out.log.summary;
        Self {
            mode: s.mode,
            collision_count: s.collision_count,
            min_ee_clearance: s.min_ee_clearance,
            min_link_clearance: s.min_link_clearance,
            final_target_error: s.final_target_error,
            mean_cycle_seconds: out.timing.mean_step_seconds,
            aborted: s.aborted.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.command {
        Command::Validate { scenario } => validate(&scenario, cli.quiet),
        Command::Run { scenario, mode, out, emit } => run_one(&scenario, mode, &out, &emit, cli.quiet),
        Command::Compare { scenario, out, emit } => compare(&scenario, &out, &emit, cli.quiet),
        Command::Accept { criteria } => accept(&criteria, cli.quiet),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// Loads a scenario, reporting problems on stderr. `Err` carries the exit code.
fn load(path: &Path) -> Result<Scenario, u8> {
    match Scenario::load(path) {
        Ok(s) => Ok(s),
        Err(ScenarioError::Io { path, source }) => {
            if source.kind() == std::io::ErrorKind::NotFound {
                eprintln!("error: scenario file not found: {path}");
            } else {
                eprintln!("error: cannot read {path}: {source}");
            }
            Err(EXIT_RUNTIME)
        }
        Err(ScenarioError::Invalid(violations)) => {
            eprintln!("{}: {} problem(s)", path.display(), violations.len());
            for v in violations.iter().take(MAX_LISTED_VIOLATIONS) {
                eprintln!("  {v}");
            }
            if violations.len() > MAX_LISTED_VIOLATIONS {
                eprintln!("  ... and {} more", violations.len() - MAX_LISTED_VIOLATIONS);
            }
            Err(EXIT_INVALID)
        }
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            Err(EXIT_INVALID)
        }
    }
}

fn validate(path: &Path, quiet: bool) -> Result<u8> {
    let scenario = match load(path) {
        Ok(s) => s,
        Err(code) => return Ok(code),
    };
    if !quiet {
        println!(
            "{}: ok ({} obstacle(s), {} cycles, mode {})",
            path.display(),
            scenario.obstacles.len(),
            scenario.cycles(),
            scenario.mode
        );
    }
    Ok(0)
}

fn write_outputs(log: &TrajectoryLog, dir: &Path, prefix: &str, emit: &[Emit]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(String, String)> = Vec::new();
    for e in emit {
        match e {
            Emit::TrajectoryCsv => files.push(("trajectory.csv".into(), log.to_csv())),
            Emit::Summary => files.push(("summary.json".into(), log.summary_json())),
            Emit::PlotData => {
                files.push(("ee_path.csv".into(), log.ee_path_csv()));
                files.push(("clearance.csv".into(), log.clearance_csv()));
                files.push(("gamma.csv".into(), log.gamma_csv()));
            }
        }
    }
    if files.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(format!("{prefix}{name}"));
        if written.contains(&path) {
            continue;
        }
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn run_one(path: &Path, mode: Option<Mode>, out: &Path, emit: &[Emit], quiet: bool) -> Result<u8> {
    let mut scenario = match load(path) {
        Ok(s) => s,
        Err(code) => return Ok(code),
    };
    if let Some(m) = mode {
        scenario = scenario.with_mode(m);
    }
    let output = run(&scenario);
    // partial logs are still written when the run aborted
    let written = write_outputs(&output.log, out, "", emit)?;
    let s = &output.log.summary;
    if let Some(reason) = &s.aborted {
        eprintln!("error: run aborted after {} cycles: {reason}", s.cycles);
    }
    if !quiet {
        println!(
            "{} [{}] cycles={} collisions={} min_ee_clearance={:.4} min_link_clearance={:.4} final_error={:.4} files={}",
            s.scenario,
            s.mode,
            s.cycles,
            s.collision_count,
            s.min_ee_clearance,
            s.min_link_clearance,
            s.final_target_error,
            written.len()
        );
    }
    Ok(s.exit_code() as u8)
}

fn format_table(rows: &[CompareRow]) -> String {
    let mut out = format!(
        "{:<16} {:>10} {:>14} {:>14} {:>14} {:>12}\n",
        "mode", "collisions", "min_ee_clr_m", "min_link_clr_m", "final_err_m", "mean_step_us"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>10} {:>14.6} {:>14.6} {:>14.6} {:>12.2}\n",
            r.mode.as_str(),
            r.collision_count,
            r.min_ee_clearance,
            r.min_link_clearance,
            r.final_target_error,
            r.mean_cycle_seconds * 1e6
        ));
    }
    out
}

fn compare(path: &Path, out: &Path, emit: &[Emit], quiet: bool) -> Result<u8> {
    let scenario = match load(path) {
        Ok(s) => s,
        Err(code) => return Ok(code),
    };
    let outputs = batch::compare_modes(&scenario, Execution::from_env());
    let rows: Vec<CompareRow> = outputs.iter().map(CompareRow::from_output).collect();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json_path = out.join("compare.json");
    fs::write(&json_path, serde_json::to_string_pretty(&rows)?).with_context(|| format!("writing {}", json_path.display()))?;
    for o in &outputs {
        write_outputs(&o.log, out, &format!("{}.", o.log.summary.mode), emit)?;
    }

    if !quiet {
        print!("{}", format_table(&rows));
    }
    let mut code = 0;
    for r in &rows {
        if let Some(reason) = &r.aborted {
            eprintln!("error: {} aborted: {reason}", r.mode);
            code = EXIT_RUNTIME;
        }
    }
    Ok(code)
}

fn accept(selected: &[u8], quiet: bool) -> Result<u8> {
    if let Some(bad) = selected.iter().find(|id| !CRITERIA.iter().any(|(c, _)| c == *id)) {
        anyhow::bail!("no acceptance criterion {bad} (valid ids are 1 to {})", CRITERIA.len());
    }
    let exec = Execution::from_env();
    let mut failed = 0;
    for (id, _) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let report = run_criterion(id, exec).expect("ids come from the table");
        if !report.passed {
            failed += 1;
        }
        if !quiet || !report.passed {
            println!("{report}");
        }
    }
    Ok(if failed == 0 { 0 } else { EXIT_COLLISION })
}
