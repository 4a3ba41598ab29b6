//! Command-line front end: validate configs, emit delivery predictions,
//! and run Monte-Carlo controller comparisons.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use meshpredict_core::config::{ConfigFile, ControllerKind, LoadedConfig};
use meshpredict_core::harness::{
    emit_report, monte_carlo, run_closed_loop, run_estimator_trace, run_joint_trace,
    ReportFormat, Scenario,
};

#[derive(Parser)]
#[command(
    name = "meshpredict",
    about = "TDMA mesh delivery prediction and delivery-aware LQG control simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every structural invariant of a config file.
    Validate { config: PathBuf },
    /// Emit per-sample marginal predictions and joint tables on the
    /// scripted scenario.
    Predict {
        config: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to trace; defaults to the plant horizon.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Monte-Carlo evaluation of one controller.
    Simulate {
        config: PathBuf,
        #[arg(long, value_parser = parse_controller)]
        controller: ControllerKind,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-run trajectories to trace.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Run all three controllers with common random numbers.
    Compare {
        config: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_controller(raw: &str) -> Result<ControllerKind, String> {
    match raw {
        "fpd" => Ok(ControllerKind::Fpd),
        "iid" => Ok(ControllerKind::Iid),
        "on" => Ok(ControllerKind::On),
        other => Err(format!("unknown controller {other:?} (expected fpd, iid, on)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.kind,
                "message": err.message,
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        CliError {
            kind,
            message: message.to_string(),
        }
    }
}

fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let file = ConfigFile::from_path(path).map_err(|e| CliError::new("config", e))?;
    file.load().map_err(|e| CliError::new("config", e))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate { config } => {
            load(&config)?;
            println!("ok");
            Ok(())
        }
        Command::Predict {
            config,
            horizon,
            out,
            samples,
        } => {
            let loaded = load(&config)?;
            let mut scenario = Scenario::from_config_with_defaults(&loaded);
            if loaded.scenario.is_none() {
                // No scenario section: trace the fault-free scripted network.
                scenario.network_mode = meshpredict_core::config::NetworkMode::Scripted;
            }
            let samples = match samples.or(scenario.plant.as_ref().map(|p| p.horizon)) {
                Some(s) => s,
                None => {
                    return Err(CliError::new(
                        "predict",
                        "no plant section; pass --samples explicitly",
                    ))
                }
            };
            std::fs::create_dir_all(&out).map_err(|e| CliError::new("io", e))?;

            let rows = run_estimator_trace(&scenario, horizon, samples)
                .map_err(|e| CliError::new("predict", e))?;
            let mut csv = String::from("k,h,marginal\n");
            for row in &rows {
                for (h, m) in row.marginals.iter().enumerate() {
                    csv.push_str(&format!("{},{},{}\n", row.sample, h, m));
                }
            }
            std::fs::write(out.join("predictions.csv"), csv)
                .map_err(|e| CliError::new("io", e))?;

            let joints = run_joint_trace(&scenario, horizon, samples)
                .map_err(|e| CliError::new("predict", e))?;
            let mut tables = serde_json::Map::new();
            for (k, table) in &joints {
                let mut entries = serde_json::Map::new();
                for (seq, p) in table.joint.iter().enumerate() {
                    let bits: String = (0..table.horizon)
                        .map(|h| {
                            if table.sequence_bit(seq, h) {
                                '1'
                            } else {
                                '0'
                            }
                        })
                        .collect();
                    entries.insert(bits, serde_json::json!(p));
                }
                tables.insert(k.to_string(), serde_json::Value::Object(entries));
            }
            let json = serde_json::to_string_pretty(&serde_json::Value::Object(tables))
                .expect("tables serialize");
            std::fs::write(out.join("predictions.json"), json + "\n")
                .map_err(|e| CliError::new("io", e))?;
            println!("wrote predictions for {samples} samples to {}", out.display());
            Ok(())
        }
        Command::Simulate {
            config,
            controller,
            runs,
            seed,
            out,
            trace,
        } => {
            let loaded = load(&config)?;
            let mut scenario =
                Scenario::from_config(&loaded).map_err(|e| CliError::new("scenario", e))?;
            if let Some(runs) = runs {
                scenario.runs = runs;
            }
            if let Some(seed) = seed {
                scenario.master_seed = seed;
            }
            std::fs::create_dir_all(&out).map_err(|e| CliError::new("io", e))?;
            let report = monte_carlo(&scenario, &[controller])
                .map_err(|e| CliError::new("simulate", e))?;
            emit_report(&report, ReportFormat::Csv, &out.join("report.csv"))
                .map_err(|e| CliError::new("io", e))?;
            emit_report(&report, ReportFormat::Json, &out.join("report.json"))
                .map_err(|e| CliError::new("io", e))?;
            if trace {
                write_trace(&scenario, controller, &out.join("trace.csv"))?;
            }
            println!("{}", summarize(&report));
            Ok(())
        }
        Command::Compare {
            config,
            runs,
            seed,
            out,
        } => {
            let loaded = load(&config)?;
            let mut scenario =
                Scenario::from_config(&loaded).map_err(|e| CliError::new("scenario", e))?;
            if let Some(runs) = runs {
                scenario.runs = runs;
            }
            if let Some(seed) = seed {
                scenario.master_seed = seed;
            }
            std::fs::create_dir_all(&out).map_err(|e| CliError::new("io", e))?;
            let report = monte_carlo(
                &scenario,
                &[ControllerKind::Fpd, ControllerKind::Iid, ControllerKind::On],
            )
            .map_err(|e| CliError::new("compare", e))?;
            emit_report(&report, ReportFormat::Csv, &out.join("report.csv"))
                .map_err(|e| CliError::new("io", e))?;
            emit_report(&report, ReportFormat::Json, &out.join("report.json"))
                .map_err(|e| CliError::new("io", e))?;
            println!("{}", summarize(&report));
            Ok(())
        }
    }
}

fn summarize(report: &meshpredict_core::harness::AggregateReport) -> String {
    let parts: Vec<String> = report
        .controllers
        .iter()
        .map(|s| {
            format!(
                "{}: {:.3} +- {:.3} ({} runs)",
                s.controller, s.mean_cost, s.std_error, s.runs
            )
        })
        .collect();
    parts.join("; ")
}

fn write_trace(
    scenario: &Scenario,
    controller: ControllerKind,
    path: &Path,
) -> Result<(), CliError> {
    let plant = scenario
        .plant
        .as_ref()
        .ok_or_else(|| CliError::new("trace", "scenario requires a plant section"))?;
    let m = plant.input_dim();
    let ell = plant.state_dim();
    let mut csv = String::from("run,k,nu");
    for i in 0..m {
        csv.push_str(&format!(",u{i}"));
    }
    for i in 0..ell {
        csv.push_str(&format!(",x{i}"));
    }
    csv.push_str(",realized_cost\n");
    for run in 0..scenario.runs {
        let outcome =
            run_closed_loop(scenario, controller, run).map_err(|e| CliError::new("trace", e))?;
        for k in 0..outcome.trajectory.horizon() {
            csv.push_str(&format!(
                "{run},{k},{}",
                outcome.trajectory.deliveries[k] as u8
            ));
            for i in 0..m {
                csv.push_str(&format!(",{}", outcome.trajectory.inputs[k][i]));
            }
            for i in 0..ell {
                csv.push_str(&format!(",{}", outcome.trajectory.states[k][i]));
            }
            csv.push_str(&format!(",{}\n", outcome.cost));
        }
    }
    std::fs::write(path, csv).map_err(|e| CliError::new("io", e))
}
