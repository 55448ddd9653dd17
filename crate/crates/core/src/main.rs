use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drive_mpc::cli::{cmd_calibrate, cmd_report, cmd_run, expand_patterns, CliError, PlannerChoice, RunManifest};
use drive_mpc::config::Config;
use drive_mpc::memory::CalibrationOptions;

#[derive(Parser)]
#[command(version, about = "Closed-loop runs, calibration and reports for the two-rate driving stack")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenarios and write traces plus metric reports.
    Run {
        #[arg(long, required = true, num_args = 1..)]
        scenarios: Vec<String>,
        #[arg(long, value_enum, default_value = "memory")]
        planner: Planner,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cassette: Option<PathBuf>,
    },
    /// Fit parameters per scene, group them and write a memory file.
    Calibrate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, default_value = "memory.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Recompute metrics from existing traces.
    Report {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Planner {
    Memory,
    Lm,
}

fn run(args: Args) -> Result<i32, CliError> {
    match args.command {
        Command::Run {
            scenarios,
            planner,
            config,
            out,
            seed,
            cassette,
        } => {
            let config = match config {
                Some(p) => Config::load(p).map_err(|e| CliError::Config(e.to_string()))?,
                None => Config::default(),
            };
            let summary = cmd_run(&RunManifest {
                scenarios: expand_patterns(&scenarios)?,
                planner: match planner {
                    Planner::Memory => PlannerChoice::Memory,
                    Planner::Lm => PlannerChoice::Lm,
                },
                config,
                out: out.clone(),
                seed,
                cassette,
            })?;
            println!("{} traces written to {}", summary.traces.len(), out.display());
            print!("{}", summary.report.to_csv());
            for f in &summary.failures {
                eprintln!("failed: {}: {}", f.path, f.error);
            }
            Ok(summary.exit_code())
        }
        Command::Calibrate { scenes, refs, out, alpha } => {
            let s = cmd_calibrate(&scenes, &refs, &out, &CalibrationOptions::default(), alpha)?;
            print!("{}", s.matrix);
            println!("{} groups from {} scenes written to {}", s.memory.groups().len(), s.entries.len(), out.display());
            for f in &s.failures {
                eprintln!("failed: {}: {}", f.path, f.error);
            }
            Ok(if s.failures.is_empty() { 0 } else { 1 })
        }
        Command::Report { traces, out } => {
            let out = out.unwrap_or_else(|| traces.clone());
            let s = cmd_report(&traces, &out)?;
            print!("{}", s.report.to_csv());
            for f in &s.skipped {
                eprintln!("skipped: {}: {}", f.path, f.error);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
