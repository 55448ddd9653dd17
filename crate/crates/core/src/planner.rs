//! Upper-layer parameter selection.
//!
//! The language-model planner prompts a service with the scene, the environment and either the
//! memory's reference parameters (first call) or the parameters currently in force (updates),
//! then extracts the six-number vector from the reply. Anything other than a valid vector
//! falls back to the memory. [`MemoryPlanner`] is the static baseline that never calls out.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::cassette::Cassette;
use crate::environment::{assemble_env, fetch_scores, render_env_text, EncoderClient, EnvDescription, LabelVocabulary};
use crate::memory::Memory;
use crate::mpc::DrivingParams;
use crate::scenario::{render_scene_text, SceneStatus, Scenario};
use crate::transport::{HttpJson, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Initial,
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    ParseFailure,
    RangeFailure,
    TransportFailure,
}

/// Where the parameters in force came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    /// Plain memory lookup, no service involved.
    Memory,
    /// A valid service response.
    Response,
    /// Memory lookup after an invalid or missing response.
    Fallback,
}

pub struct PlanRequest<'a> {
    pub kind: PromptKind,
    pub t: f64,
    pub scenario: &'a Scenario,
    /// Scene built from the actual simulated ego state.
    pub scene: SceneStatus,
    /// Parameters in force when an update is requested.
    pub previous: Option<DrivingParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub params: DrivingParams,
    pub source: ParamSource,
    pub verdict: Option<Verdict>,
    /// Service latency, measured or replayed (s).
    pub latency_s: f64,
    pub detail: Option<String>,
}

pub trait Planner: Send {
    fn plan(&mut self, request: &PlanRequest) -> PlanOutcome;

    fn name(&self) -> &str;

    /// Requests a replaying planner could not answer from its recording.
    fn replay_misses(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Always returns the same parameters.
#[derive(Debug, Clone)]
pub struct FixedPlanner {
    params: DrivingParams,
}

impl FixedPlanner {
    pub fn new(params: DrivingParams) -> Self {
        Self { params }
    }
}

impl Planner for FixedPlanner {
    fn plan(&mut self, _: &PlanRequest) -> PlanOutcome {
        PlanOutcome {
            params: self.params,
            source: ParamSource::Memory,
            verdict: None,
            latency_s: 0.0,
            detail: None,
        }
    }

    fn name(&self) -> &str {
        "fixed"
    }
}

/// Parameters straight from the memory for the scenario's feature cell.
pub fn memory_planner(features: crate::scenario::Features, memory: &Memory) -> DrivingParams {
    memory.lookup(features)
}

/// Static baseline: the memory's parameters for the scenario, never updated by a service.
#[derive(Debug, Clone)]
pub struct MemoryPlanner {
    memory: Arc<Memory>,
}

impl MemoryPlanner {
    pub fn new(memory: Memory) -> Self {
        Self {
            memory: Arc::new(memory),
        }
    }

    pub fn shared(memory: Arc<Memory>) -> Self {
        Self { memory }
    }
}

impl Planner for MemoryPlanner {
    fn plan(&mut self, request: &PlanRequest) -> PlanOutcome {
        PlanOutcome {
            params: memory_planner(request.scenario.features(), &self.memory),
            source: ParamSource::Memory,
            verdict: None,
            latency_s: 0.0,
            detail: None,
        }
    }

    fn name(&self) -> &str {
        "memory"
    }
}

/// Returns a scripted parameter sequence, one entry per call (the last repeats), and records
/// the ego position each request saw.
#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    plans: Vec<DrivingParams>,
    latencies: Vec<f64>,
    calls: usize,
    seen: Vec<(f64, f64)>,
}

impl ScriptedPlanner {
    pub fn new(plans: Vec<DrivingParams>) -> Self {
        assert!(!plans.is_empty(), "scripted planner needs at least one plan");
        Self {
            plans,
            latencies: Vec::new(),
            calls: 0,
            seen: Vec::new(),
        }
    }

    /// Per-call latencies reported as recorded latency.
    pub fn with_latencies(mut self, latencies: Vec<f64>) -> Self {
        self.latencies = latencies;
        self
    }

    /// `(request time, ego position)` for every call so far.
    pub fn seen_states(&self) -> Vec<(f64, f64)> {
        self.seen.clone()
    }
}

impl Planner for ScriptedPlanner {
    fn plan(&mut self, request: &PlanRequest) -> PlanOutcome {
        let k = self.calls;
        self.calls += 1;
        if let Some(ego) = request.scene.ego() {
            self.seen.push((request.t, ego.x));
        }
        PlanOutcome {
            params: self.plans[k.min(self.plans.len() - 1)],
            source: ParamSource::Response,
            verdict: Some(Verdict::Valid),
            latency_s: self.latencies.get(k).copied().unwrap_or(0.0),
            detail: None,
        }
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

pub const COT_STEPS: [(&str, &str); 5] = [
    (
        "Understand the current situation",
        "weather, lighting, road type and condition, obstacles, and the motion of the ego vehicle and anything ahead of it.",
    ),
    (
        "Evaluate the Prediction Horizon",
        "choose N, the number of 0.1 s steps the controller looks ahead (integer, 1 to 30).",
    ),
    (
        "Set Cost Weights",
        "Q is fixed at 1; choose the control-effort weight R (> 0) and the headway weight Q_h (>= 0).",
    ),
    (
        "Define Desired speed",
        "choose v_d in m/s (0 to 30) suited to the conditions.",
    ),
    (
        "Determine Desired Headway",
        "choose the time gap h_d in s (0.5 to 5) to keep to the vehicle or stop line ahead.",
    ),
];

const DEFAULT_SYSTEM: &str = "You select the driving parameters of a model predictive \
controller that drives an autonomous vehicle along its lane.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub instruction: String,
    pub memory: Option<String>,
    pub env: String,
    pub scene: String,
    pub previous: Option<String>,
    pub image_ref: Option<String>,
    pub cot_steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("initial prompt needs reference parameters from memory")]
    MissingMemory,
    #[error("update prompt needs the previous driving parameters")]
    MissingPrevious,
}

pub fn build_prompt(
    kind: PromptKind,
    memory_params: Option<&DrivingParams>,
    env: Option<&EnvDescription>,
    scene: &SceneStatus,
    previous: Option<&DrivingParams>,
    image_ref: Option<&str>,
) -> Result<PromptBundle, PromptError> {
    let (memory, previous) = match kind {
        PromptKind::Initial => (
            Some(format!(
                "Reference parameters for similar scenarios: {}",
                memory_params.ok_or(PromptError::MissingMemory)?
            )),
            None,
        ),
        PromptKind::Update => (
            None,
            Some(format!(
                "Driving parameters currently in use: {}",
                previous.ok_or(PromptError::MissingPrevious)?
            )),
        ),
    };
    let instruction = match kind {
        PromptKind::Initial => "Choose the driving parameters [N, Q, R, Q_h, v_d, h_d] for the scene below.",
        PromptKind::Update => "Update the driving parameters [N, Q, R, Q_h, v_d, h_d] for the scene below.",
    };
    let env = match env {
        Some(e) => render_env_text(e),
        None => "Environment description unavailable.\n".to_string(),
    };
    Ok(PromptBundle {
        kind,
        instruction: instruction.to_string(),
        memory,
        env,
        scene: render_scene_text(scene),
        previous,
        image_ref: image_ref.map(str::to_string),
        cot_steps: COT_STEPS
            .iter()
            .enumerate()
            .map(|(i, (name, body))| format!("{}. {name}: {body}", i + 1))
            .collect(),
    })
}

impl PromptBundle {
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.instruction);
        out.push_str("\n\n");
        if let Some(m) = &self.memory {
            out.push_str(m);
            out.push_str("\n\n");
        }
        if let Some(p) = &self.previous {
            out.push_str(p);
            out.push_str("\n\n");
        }
        out.push_str("Environment:\n");
        out.push_str(&self.env);
        out.push('\n');
        out.push_str(&self.scene);
        if let Some(img) = &self.image_ref {
            out.push_str(&format!("Front camera frame: {img}\n"));
        }
        out.push_str("\nThink step by step:\n");
        for step in &self.cot_steps {
            out.push_str(step);
            out.push('\n');
        }
        out.push_str(
            "\nEnd your answer with the final vector of six numbers in square brackets, \
             in the order N, Q, R, Q_h, v_d, h_d, for example [10, 1, 0.5, 2, 8, 3].\n",
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerResponse {
    pub raw_text: String,
    pub parsed: Option<DrivingParams>,
    pub latency_s: f64,
    pub verdict: Verdict,
    pub reason: Option<String>,
}

fn bracket_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").unwrap())
}

fn numeric_list(body: &str) -> Option<Vec<f64>> {
    let items: Vec<&str> = body.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return None;
    }
    let nums: Vec<f64> = items
        .iter()
        .map(|s| {
            let ok = s.chars().all(|c| c.is_ascii_digit() || "+-.eE".contains(c));
            if ok {
                s.parse::<f64>().ok().filter(|x| x.is_finite())
            } else {
                None
            }
        })
        .collect::<Option<_>>()?;
    Some(nums)
}

/// Extracts the last bracketed numeric list and validates it as driving parameters.
pub fn parse_response(raw_text: &str, latency_s: f64) -> PlannerResponse {
    let fail = |verdict, reason: String| PlannerResponse {
        raw_text: raw_text.to_string(),
        parsed: None,
        latency_s,
        verdict,
        reason: Some(reason),
    };
    let Some(nums) = bracket_regex()
        .captures_iter(raw_text)
        .filter_map(|c| numeric_list(&c[1]))
        .last()
    else {
        return fail(Verdict::ParseFailure, "no bracketed numeric list".into());
    };
    if nums.len() != 6 {
        return fail(
            Verdict::ParseFailure,
            format!("expected 6 numbers, found {}", nums.len()),
        );
    }
    let n = nums[0].round();
    if !(1.0..=crate::mpc::MAX_HORIZON as f64).contains(&n) {
        return fail(Verdict::RangeFailure, format!("N={} out of range", nums[0]));
    }
    if !(0.999..=1.001).contains(&nums[1]) {
        return fail(Verdict::RangeFailure, format!("Q={} is not 1", nums[1]));
    }
    let params = DrivingParams::new(n as usize, nums[2], nums[3], nums[4], nums[5]);
    if let Err(err) = params.validate() {
        return fail(Verdict::RangeFailure, err.to_string());
    }
    PlannerResponse {
        raw_text: raw_text.to_string(),
        parsed: Some(params),
        latency_s,
        verdict: Verdict::Valid,
        reason: None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub calls: usize,
    pub valid: usize,
    pub parse_failure: usize,
    pub range_failure: usize,
    pub transport_failure: usize,
}

impl CallCounts {
    pub fn failures(&self) -> usize {
        self.parse_failure + self.range_failure + self.transport_failure
    }

    fn add(&mut self, other: &CallCounts) {
        self.calls += other.calls;
        self.valid += other.valid;
        self.parse_failure += other.parse_failure;
        self.range_failure += other.range_failure;
        self.transport_failure += other.transport_failure;
    }
}

/// Per-scenario verdict counts and latency samples.
///
/// A scenario counts as complete when none of its planner calls failed; scenes that recover
/// through the memory fallback still finish but are not complete.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompletionLedger {
    pub scenarios: BTreeMap<String, CallCounts>,
    pub latencies: Vec<f64>,
}

impl CompletionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a scenario that may make no service calls at all.
    pub fn register(&mut self, scenario_id: &str) {
        self.scenarios.entry(scenario_id.to_string()).or_default();
    }

    pub fn record(&mut self, scenario_id: &str, verdict: Verdict, latency_s: Option<f64>) {
        let c = self.scenarios.entry(scenario_id.to_string()).or_default();
        c.calls += 1;
        match verdict {
            Verdict::Valid => c.valid += 1,
            Verdict::ParseFailure => c.parse_failure += 1,
            Verdict::RangeFailure => c.range_failure += 1,
            Verdict::TransportFailure => c.transport_failure += 1,
        }
        if let Some(l) = latency_s {
            self.latencies.push(l);
        }
    }

    pub fn totals(&self) -> CallCounts {
        let mut t = CallCounts::default();
        self.scenarios.values().for_each(|c| t.add(c));
        t
    }

    pub fn completed(&self) -> usize {
        self.scenarios.values().filter(|c| c.failures() == 0).count()
    }

    /// Completed scenarios over all scenarios; 1.0 for an empty ledger.
    pub fn completion_rate(&self) -> f64 {
        if self.scenarios.is_empty() {
            return 1.0;
        }
        self.completed() as f64 / self.scenarios.len() as f64
    }

    pub fn merge(&mut self, other: &CompletionLedger) {
        for (id, c) in &other.scenarios {
            self.scenarios.entry(id.clone()).or_default().add(c);
        }
        self.latencies.extend_from_slice(&other.latencies);
    }

    /// Rebuilds the ledger from recorded planner events.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a crate::simulator::SimTrace>) -> Self {
        let mut ledger = Self::new();
        for trace in traces {
            let id = &trace.header.scenario_id;
            ledger.register(id);
            for ev in &trace.events {
                if let Some(v) = ev.verdict {
                    let latency = ev.response_t.map(|r| r - ev.request_t).filter(|_| {
                        ev.kind == crate::planner::PromptKind::Update && v != Verdict::TransportFailure
                    });
                    ledger.record(id, v, latency);
                }
            }
        }
        ledger
    }
}

/// Request body sent to the language-model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub system: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Option<serde_json::Value>,
}

pub trait LmClient: Send {
    /// Returns the reply and the service latency in seconds.
    fn complete(&self, request: &LmRequest) -> Result<(LmResponse, f64), TransportError>;

    fn misses(&self) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct HttpLmClient {
    http: HttpJson,
}

impl HttpLmClient {
    /// `credential_env` names the environment variable holding a bearer token, if any.
    pub fn new(endpoint: impl Into<String>, timeout: Duration, credential_env: Option<&str>) -> Self {
        let mut http = HttpJson::new(endpoint, timeout);
        if let Some(token) = credential_env.and_then(|name| std::env::var(name).ok()) {
            http = http.with_header("Authorization", format!("Bearer {token}"));
        }
        Self { http }
    }
}

impl LmClient for HttpLmClient {
    fn complete(&self, request: &LmRequest) -> Result<(LmResponse, f64), TransportError> {
        self.http
            .post(request)
            .map(|(resp, elapsed)| (resp, elapsed.as_secs_f64()))
    }
}

/// Replays recorded replies; the recorded latency is returned as the service latency.
#[derive(Debug, Clone)]
pub struct CassetteLmClient {
    pub cassette: Arc<Cassette>,
}

impl CassetteLmClient {
    pub fn new(cassette: Cassette) -> Self {
        Self {
            cassette: Arc::new(cassette),
        }
    }
}

impl LmClient for CassetteLmClient {
    fn complete(&self, request: &LmRequest) -> Result<(LmResponse, f64), TransportError> {
        let entry = self.cassette.lookup(request)?;
        let resp = serde_json::from_value(entry.response.clone())
            .map_err(|e| TransportError::Decode(e.to_string()))?;
        Ok((resp, entry.latency_s))
    }

    fn misses(&self) -> Vec<String> {
        self.cassette.misses()
    }
}

/// Forwards to a live client and records every reply with its measured latency.
pub struct RecordingLmClient<C> {
    inner: C,
    cassette: Arc<Mutex<Cassette>>,
}

impl<C: LmClient> RecordingLmClient<C> {
    pub fn new(inner: C, cassette: Arc<Mutex<Cassette>>) -> Self {
        Self { inner, cassette }
    }
}

impl<C: LmClient> LmClient for RecordingLmClient<C> {
    fn complete(&self, request: &LmRequest) -> Result<(LmResponse, f64), TransportError> {
        let (resp, latency) = self.inner.complete(request)?;
        let value = serde_json::to_value(&resp).expect("responses serialize");
        self.cassette.lock().unwrap().insert(request, value, latency);
        Ok((resp, latency))
    }
}

/// Scripted test double: answers calls in order from a fixed transcript (the last answer
/// repeats) and keeps the requests it received.
pub struct ScriptedLmClient {
    replies: Vec<Result<(String, f64), TransportError>>,
    next: Mutex<usize>,
    requests: Mutex<Vec<LmRequest>>,
}

impl ScriptedLmClient {
    pub fn new(replies: Vec<Result<(String, f64), TransportError>>) -> Self {
        assert!(!replies.is_empty(), "scripted client needs at least one reply");
        Self {
            replies,
            next: Mutex::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn texts(texts: &[&str], latency_s: f64) -> Self {
        Self::new(texts.iter().map(|t| Ok((t.to_string(), latency_s))).collect())
    }

    pub fn requests(&self) -> Vec<LmRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl LmClient for ScriptedLmClient {
    fn complete(&self, request: &LmRequest) -> Result<(LmResponse, f64), TransportError> {
        self.requests.lock().unwrap().push(request.clone());
        let mut next = self.next.lock().unwrap();
        let k = (*next).min(self.replies.len() - 1);
        *next += 1;
        self.replies[k].clone().map(|(text, latency)| {
            (
                LmResponse {
                    text,
                    usage: None,
                },
                latency,
            )
        })
    }
}

impl<T: LmClient + ?Sized + Sync> LmClient for Arc<T> {
    fn complete(&self, request: &LmRequest) -> Result<(LmResponse, f64), TransportError> {
        (**self).complete(request)
    }

    fn misses(&self) -> Vec<String> {
        (**self).misses()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSettings {
    pub system: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: Option<String>,
    /// Directory holding camera frames named by image id; frames are sent base64-encoded.
    pub image_dir: Option<PathBuf>,
    /// Additional attempts after a transport failure.
    pub retries: usize,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM.to_string(),
            temperature: 0.0,
            max_tokens: 1024,
            model: None,
            image_dir: None,
            retries: 1,
        }
    }
}

/// Sends one prompt, parses the reply and falls back to `fallback` unless it is valid.
pub fn plan(
    prompt: &PromptBundle,
    client: &dyn LmClient,
    fallback: DrivingParams,
    settings: &LmSettings,
) -> (DrivingParams, PlannerResponse) {
    let image = match (&settings.image_dir, &prompt.image_ref) {
        (Some(dir), Some(id)) => match std::fs::read(dir.join(id)) {
            Ok(bytes) => Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
            Err(err) => {
                log::warn!("camera frame {id} unreadable: {err}");
                None
            }
        },
        _ => None,
    };
    let request = LmRequest {
        system: settings.system.clone(),
        prompt: prompt.text(),
        image,
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        model: settings.model.clone(),
    };
    let mut last_err = None;
    for attempt in 0..=settings.retries {
        match client.complete(&request) {
            Ok((resp, latency)) => {
                let parsed = parse_response(&resp.text, latency);
                let params = parsed.parsed.unwrap_or(fallback);
                return (params, parsed);
            }
            Err(err) => {
                log::warn!("language-model call failed (attempt {}): {err}", attempt + 1);
                let retryable = !matches!(err, TransportError::CassetteMiss(_));
                last_err = Some(err);
                if !retryable {
                    break;
                }
            }
        }
    }
    let response = PlannerResponse {
        raw_text: String::new(),
        parsed: None,
        latency_s: 0.0,
        verdict: Verdict::TransportFailure,
        reason: last_err.map(|e| e.to_string()),
    };
    (fallback, response)
}

/// Planner backed by a language-model service, with memory fallback.
pub struct LmPlanner {
    client: Box<dyn LmClient>,
    memory: Arc<Memory>,
    encoder: Option<Box<dyn EncoderClient>>,
    vocabulary: LabelVocabulary,
    settings: LmSettings,
    ledger: CompletionLedger,
}

impl LmPlanner {
    pub fn new(client: Box<dyn LmClient>, memory: Arc<Memory>) -> Self {
        Self {
            client,
            memory,
            encoder: None,
            vocabulary: LabelVocabulary::default(),
            settings: LmSettings::default(),
            ledger: CompletionLedger::new(),
        }
    }

    pub fn with_encoder(mut self, encoder: Box<dyn EncoderClient>, vocabulary: LabelVocabulary) -> Self {
        self.encoder = Some(encoder);
        self.vocabulary = vocabulary;
        self
    }

    pub fn with_settings(mut self, settings: LmSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn ledger(&self) -> &CompletionLedger {
        &self.ledger
    }

    fn environment(&self, request: &PlanRequest) -> Option<EnvDescription> {
        let scores = fetch_scores(
            request.scenario.image_at(request.t),
            self.encoder.as_deref(),
            &self.vocabulary,
            request.scenario.env_tags(),
        );
        match scores.map_err(|e| e.to_string()).and_then(|s| assemble_env(&s).map_err(|e| e.to_string())) {
            Ok(env) => Some(env),
            Err(err) => {
                log::warn!("no environment description at t={}: {err}", request.t);
                None
            }
        }
    }
}

impl Planner for LmPlanner {
    fn plan(&mut self, request: &PlanRequest) -> PlanOutcome {
        let id = request.scenario.id().to_string();
        self.ledger.register(&id);
        let fallback = self.memory.lookup(request.scenario.features());
        let env = self.environment(request);
        let prompt = match build_prompt(
            request.kind,
            Some(&fallback),
            env.as_ref(),
            &request.scene,
            request.previous.as_ref(),
            request.scenario.image_at(request.t),
        ) {
            Ok(p) => p,
            Err(err) => {
                return PlanOutcome {
                    params: fallback,
                    source: ParamSource::Fallback,
                    verdict: None,
                    latency_s: 0.0,
                    detail: Some(err.to_string()),
                }
            }
        };
        let (params, response) = plan(&prompt, self.client.as_ref(), fallback, &self.settings);
        let latency = (response.verdict != Verdict::TransportFailure).then_some(response.latency_s);
        self.ledger.record(&id, response.verdict, latency);
        PlanOutcome {
            params,
            source: if response.verdict == Verdict::Valid {
                ParamSource::Response
            } else {
                ParamSource::Fallback
            },
            verdict: Some(response.verdict),
            latency_s: response.latency_s,
            detail: response.reason,
        }
    }

    fn name(&self) -> &str {
        "lm"
    }

    fn replay_misses(&self) -> Vec<String> {
        self.client.misses()
    }
}
