//! Command-line runner: executes scenario files (bundled or on disk), writes
//! CSV artifacts, and prints a one-line summary per invocation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use locsim_core::scenario::{
    batch_csv, run_batch, run_scenario, write_outputs, RunOptions, RunResult, Scenario,
    ScenarioError,
};

const BUNDLED: &[(&str, &str)] = &[
    (
        "table1_power_vs_distance",
        include_str!("../../../scenarios/table1_power_vs_distance.scn"),
    ),
    ("shadow_area", include_str!("../../../scenarios/shadow_area.scn")),
    ("sched_manip_unit", include_str!("../../../scenarios/sched_manip_unit.scn")),
    ("boost_race", include_str!("../../../scenarios/boost_race.scn")),
    ("repeater_table5", include_str!("../../../scenarios/repeater_table5.scn")),
    ("e2e_lab", include_str!("../../../scenarios/e2e_lab.scn")),
    (
        "rnti_acquisition_crowd",
        include_str!("../../../scenarios/rnti_acquisition_crowd.scn"),
    ),
];

#[derive(Parser)]
#[command(
    name = "locsim",
    about = "Deterministic subframe-level simulator of an LTE uplink localization attack",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario once and print a one-line summary
    Run {
        /// Bundled scenario name or path to a .scn file
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Disarm the power-boost arm
        #[arg(long)]
        no_boost: bool,
        /// Disarm the scheduling-manipulation arm
        #[arg(long)]
        no_sched_manip: bool,
        /// Directory for metrics.csv and per-point events/sweeps CSVs
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario across several seeds and aggregate the metrics
    Batch {
        scenario: String,
        /// Comma-separated seed list
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        no_boost: bool,
        #[arg(long)]
        no_sched_manip: bool,
        /// Directory for the combined batch metrics CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a scenario file without running it
    Validate { scenario: String },
    /// List the bundled scenarios
    ListScenarios,
}

fn load(name_or_path: &str) -> Result<Scenario, ScenarioError> {
    let key = name_or_path.strip_suffix(".scn").unwrap_or(name_or_path);
    if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == key) {
        return Scenario::from_toml_str(text);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(ScenarioError::Invalid(vec![format!(
            "{name_or_path:?} is neither a bundled scenario nor a file; try list-scenarios"
        )]));
    }
    Scenario::from_file(path)
}

fn summarize(r: &RunResult) -> String {
    let n = r.points.len();
    let localized = r.points.iter().filter(|p| p.metrics.success).count();
    let acquired = r.points.iter().filter(|p| p.metrics.acquired_rnti.is_some()).count();
    let anomalies = r.points.iter().filter(|p| p.metrics.anomaly_flagged).count();
    let dists: Vec<f64> = r.points.iter().filter_map(|p| p.metrics.distance_error_m).collect();
    let dist = locsim_core::localizer::percentile_nearest_rank(&dists, 70.0)
        .map(|v| format!("{v:.2}m"))
        .unwrap_or_else(|_| "n/a".into());
    format!(
        "{} seed={} points={n} localized={localized}/{n} acquired={acquired}/{n} p70_dist_err={dist} anomaly_flagged={anomalies}/{n}",
        r.scenario, r.seed
    )
}

fn run_cmd(cmd: Cmd) -> Result<(), (u8, String)> {
    match cmd {
        Cmd::Run { scenario, seed, no_boost, no_sched_manip, out } => {
            let scn = load(&scenario).map_err(invalid)?;
            let opts = RunOptions { seed, no_boost, no_sched_manip };
            let result = run_scenario(&scn, &opts).map_err(invalid)?;
            if let Some(dir) = out {
                write_outputs(&result, &dir).map_err(|e| (2, format!("writing outputs: {e}")))?;
            }
            println!("{}", summarize(&result));
            Ok(())
        }
        Cmd::Batch { scenario, seeds, no_boost, no_sched_manip, out } => {
            let scn = load(&scenario).map_err(invalid)?;
            let base = RunOptions { seed: 0, no_boost, no_sched_manip };
            let batch = run_batch(&scn, &seeds, &base).map_err(invalid)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .and_then(|()| std::fs::write(dir.join("batch_metrics.csv"), batch_csv(&batch)))
                    .map_err(|e| (2, format!("writing outputs: {e}")))?;
            }
            let a = &batch.aggregate;
            println!(
                "{} seeds={} runs={} success_rate={:.3} p70_dist_err={} p70_bearing_err={}",
                batch.scenario,
                seeds.len(),
                a.runs,
                a.success_rate,
                a.p70_dist_err_m.map(|v| format!("{v:.2}m")).unwrap_or_else(|| "n/a".into()),
                a.p70_bearing_err_deg.map(|v| format!("{v:.2}deg")).unwrap_or_else(|| "n/a".into()),
            );
            Ok(())
        }
        Cmd::Validate { scenario } => {
            let scn = load(&scenario).map_err(invalid)?;
            println!("ok: {} ({} points)", scn.name, scn.victim.points.len());
            Ok(())
        }
        Cmd::ListScenarios => {
            for (name, text) in BUNDLED {
                let desc = text
                    .lines()
                    .find_map(|l| l.strip_prefix("description = "))
                    .map(|d| d.trim_matches('"').to_string())
                    .unwrap_or_default();
                println!("{name:<26} {desc}");
            }
            Ok(())
        }
    }
}

fn invalid(e: ScenarioError) -> (u8, String) {
    match e {
        ScenarioError::Io(io) => (2, io.to_string()),
        other => (1, other.to_string()),
    }
}

fn main() -> ExitCode {
    match run_cmd(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
