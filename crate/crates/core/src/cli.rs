//! Batch front end: run scenario sets, calibrate a memory, regenerate reports.
//!
//! Exit codes: 0 success, 1 scenario errors, 2 configuration errors.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cassette::Cassette;
use crate::config::Config;
use crate::environment::{CassetteEncoder, EncoderClient, HttpEncoderClient, RecordingEncoder};
use crate::io::write_atomic;
use crate::memory::{
    build_groups, calibrate_scene, significance_matrix, CalibrationOptions, Memory, MemoryEntry, ReferenceSample,
};
use crate::metrics::{report_from_traces, MetricsReport, ScenarioMetrics};
use crate::planner::{CassetteLmClient, HttpLmClient, LmClient, LmPlanner, MemoryPlanner, Planner, RecordingLmClient};
use crate::scenario::{load_scenario_file, Scenario};
use crate::simulator::{run_scenario, SimTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerChoice {
    Memory,
    Lm,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) | CliError::Output { .. } => 1,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Expands glob patterns, sorted; a plain path is kept even if it does not exist.
pub fn expand_patterns(patterns: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in patterns {
        let matches: Vec<PathBuf> = glob::glob(p)
            .map_err(|e| CliError::Config(format!("bad pattern {p}: {e}")))?
            .filter_map(Result::ok)
            .collect();
        if matches.is_empty() {
            out.push(PathBuf::from(p));
        } else {
            out.extend(matches);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub scenarios: Vec<PathBuf>,
    pub planner: PlannerChoice,
    pub config: Config,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Replayed when the file exists; otherwise live exchanges are recorded into it.
    pub cassette: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub traces: Vec<String>,
    pub failures: Vec<Failure>,
    pub report: MetricsReport,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

enum Backend {
    Memory,
    Replay(Cassette),
    Live {
        lm_endpoint: String,
        record: Option<(PathBuf, Arc<Mutex<Cassette>>)>,
    },
}

fn backend(manifest: &RunManifest) -> Result<Backend, CliError> {
    if manifest.planner == PlannerChoice::Memory {
        return Ok(Backend::Memory);
    }
    let services = &manifest.config.services;
    match (&manifest.cassette, &services.lm_endpoint) {
        (Some(path), _) if path.exists() => Cassette::load(path)
            .map(Backend::Replay)
            .map_err(|e| CliError::Config(e.to_string())),
        (cassette, Some(endpoint)) => Ok(Backend::Live {
            lm_endpoint: endpoint.clone(),
            record: cassette
                .as_ref()
                .map(|p| (p.clone(), Arc::new(Mutex::new(Cassette::new())))),
        }),
        (_, None) => Err(CliError::Config(
            "planner lm needs services.lm_endpoint in the config or an existing --cassette".into(),
        )),
    }
}

fn build_planner(backend: &Backend, config: &Config, memory: &Arc<Memory>) -> Box<dyn Planner> {
    let timeout = Duration::from_secs_f64(config.services.timeout_s);
    let (client, encoder): (Box<dyn LmClient>, Option<Box<dyn EncoderClient>>) = match backend {
        Backend::Memory => return Box::new(MemoryPlanner::shared(memory.clone())),
        Backend::Replay(cassette) => (
            Box::new(CassetteLmClient::new(cassette.clone())),
            Some(Box::new(CassetteEncoder {
                cassette: cassette.clone(),
            })),
        ),
        Backend::Live { lm_endpoint, record } => {
            let live = HttpLmClient::new(lm_endpoint.clone(), timeout, Some(&config.services.credential_env));
            let encoder = config
                .services
                .encoder_endpoint
                .as_ref()
                .map(|e| HttpEncoderClient::new(e.clone(), timeout));
            match record {
                Some((_, tape)) => (
                    Box::new(RecordingLmClient::new(live, tape.clone())),
                    encoder.map(|e| Box::new(RecordingEncoder::new(e, tape.clone())) as Box<dyn EncoderClient>),
                ),
                None => (Box::new(live), encoder.map(|e| Box::new(e) as Box<dyn EncoderClient>)),
            }
        }
    };
    let mut planner = LmPlanner::new(client, memory.clone()).with_settings(config.lm.clone());
    if let Some(e) = encoder {
        planner = planner.with_encoder(e, config.vocabulary.clone());
    }
    Box::new(planner)
}

pub fn load_memory(config: &Config) -> Result<Memory, CliError> {
    match &config.memory {
        Some(path) => Memory::load(path).map_err(|e| CliError::Config(e.to_string())),
        None => Ok(Memory::builtin()),
    }
}

/// Simulates every scenario and writes `traces/<id>.ndjson`, `reports/<id>.json`,
/// `report.json`, `report.csv` and `run.json` under the output directory.
pub fn cmd_run(manifest: &RunManifest) -> Result<RunSummary, CliError> {
    manifest
        .config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let backend = backend(manifest)?;
    let memory = Arc::new(load_memory(&manifest.config)?);
    let mut sim = manifest.config.sim.clone();
    if let Some(seed) = manifest.seed {
        sim.seed = seed;
    }
    if manifest.scenarios.is_empty() {
        return Err(CliError::Config("no scenarios given".into()));
    }

    let outcomes: Vec<Result<SimTrace, Failure>> = manifest
        .scenarios
        .par_iter()
        .map(|path| {
            let fail = |error: String| Failure {
                path: path.display().to_string(),
                error,
            };
            let scenario = load_scenario_file(path).map_err(|e| fail(e.to_string()))?;
            let scenario = manifest.config.apply_plant(scenario);
            let mut planner = build_planner(&backend, &manifest.config, &memory);
            run_scenario(&scenario, planner.as_mut(), &sim).map_err(|e| fail(e.to_string()))
        })
        .collect();

    if let Backend::Live {
        record: Some((path, tape)),
        ..
    } = &backend
    {
        tape.lock()
            .unwrap()
            .save(path)
            .map_err(|e| CliError::Output {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
    }

    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(t) => traces.push(t),
            Err(f) => failures.push(f),
        }
    }
    let mut names = Vec::new();
    for t in &traces {
        let stem = file_stem(&t.header.scenario_id);
        let path = manifest.out.join("traces").join(format!("{stem}.ndjson"));
        write(&path, &t.to_ndjson())?;
        let single = serde_json::to_string_pretty(&ScenarioMetrics::from_trace(t)).expect("metrics serialize");
        write(&manifest.out.join("reports").join(format!("{stem}.json")), &(single + "\n"))?;
        names.push(format!("traces/{stem}.ndjson"));
    }
    let report = report_from_traces(&traces);
    write(&manifest.out.join("report.json"), &report.to_json())?;
    write(&manifest.out.join("report.csv"), &report.to_csv())?;
    let summary = RunSummary {
        traces: names,
        failures,
        report,
    };
    let run = serde_json::json!({ "traces": summary.traces, "failures": summary.failures });
    write(
        &manifest.out.join("run.json"),
        &(serde_json::to_string_pretty(&run).expect("summary serializes") + "\n"),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateSummary {
    pub memory: Memory,
    pub entries: Vec<MemoryEntry>,
    pub failures: Vec<Failure>,
    /// Significance matrices as text, one block per parameter.
    pub matrix: String,
}

/// Reference trajectory file: a JSON array of `{t, x, v}` samples.
pub fn load_reference(path: &Path) -> Result<Vec<ReferenceSample>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Calibrates every `*.json` scene in `scenes` against `refs/<scene id>.json`, groups the
/// results and writes the memory file.
pub fn cmd_calibrate(
    scenes: &Path,
    refs: &Path,
    out: &Path,
    opts: &CalibrationOptions,
    alpha: f64,
) -> Result<CalibrateSummary, CliError> {
    let pattern = scenes.join("*.json");
    let paths = expand_patterns(&[pattern.display().to_string()])?;
    let paths: Vec<PathBuf> = paths.into_iter().filter(|p| p.is_file()).collect();
    if paths.is_empty() {
        return Err(CliError::Input(format!("no scenes in {}", scenes.display())));
    }
    let results: Vec<Result<MemoryEntry, Failure>> = paths
        .par_iter()
        .map(|path| {
            let fail = |error: String| Failure {
                path: path.display().to_string(),
                error,
            };
            let scenario: Scenario = load_scenario_file(path).map_err(|e| fail(e.to_string()))?;
            let reference = load_reference(&refs.join(format!("{}.json", scenario.id()))).map_err(fail)?;
            let cal = calibrate_scene(&scenario, &reference, opts).map_err(|e| fail(e.to_string()))?;
            log::info!("{}: {:?} rmse {:.4} m", scenario.id(), cal.params, cal.rmse);
            Ok(MemoryEntry {
                scenario_id: scenario.id().to_string(),
                features: scenario.features(),
                params: cal.params,
            })
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(f) => {
                log::warn!("calibration failed for {}: {}", f.path, f.error);
                failures.push(f);
            }
        }
    }
    let pvals = significance_matrix(&entries);
    let groups = build_groups(&entries, &pvals, alpha).map_err(|e| CliError::Input(e.to_string()))?;
    let memory = Memory::new(groups).map_err(|e| CliError::Input(e.to_string()))?;
    memory.save(out).map_err(|e| CliError::Output {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(CalibrateSummary {
        memory,
        entries,
        failures,
        matrix: pvals.render(alpha),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub report: MetricsReport,
    pub skipped: Vec<Failure>,
}

/// Recomputes metrics from `*.ndjson` traces (searched recursively) and writes
/// `report.json` and `report.csv` into `out`. Corrupt traces are skipped.
pub fn cmd_report(traces_dir: &Path, out: &Path) -> Result<ReportSummary, CliError> {
    let pattern = traces_dir.join("**").join("*.ndjson");
    let paths: Vec<PathBuf> = expand_patterns(&[pattern.display().to_string()])?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    if paths.is_empty() {
        return Err(CliError::Input(format!("no traces in {}", traces_dir.display())));
    }
    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        match SimTrace::load(&path) {
            Ok(t) => traces.push(t),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(Failure {
                    path: path.display().to_string(),
                    error: e.to_string(),
                });
            }
        }
    }
    let report = report_from_traces(&traces);
    write(&out.join("report.json"), &report.to_json())?;
    write(&out.join("report.csv"), &report.to_csv())?;
    Ok(ReportSummary { report, skipped })
}
