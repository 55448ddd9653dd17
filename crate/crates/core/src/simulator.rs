//! Two-rate closed loop: the MPC and plant step every `dt_l`, the planner refreshes the
//! driving parameters every `dt_u` and its responses land after a latency.
//!
//! The control loop never waits on the planner after the initial call. A response takes
//! effect at the first control step at or after its arrival time, and only the most recently
//! issued request may ever be applied.
//!
//! Traces serialize as newline-delimited JSON: one `header` record, then one `step` record
//! per control step, then `planner` events in request order, then `anomaly` records. Fields
//! appear in declaration order.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{plant_step, VehicleState};
use crate::mpc::{mpc_step, DrivingParams, MpcConfig, QpStatus, SpacingPolicy};
use crate::planner::{ParamSource, PlanOutcome, PlanRequest, Planner, PromptKind, Verdict};
use crate::scenario::{encode_scene, encode_scene_noisy, Features, PerceptionNoise, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    VirtualTime,
    WallClock,
}

/// How long a planner response takes to arrive, in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    Zero,
    Fixed { seconds: f64 },
    /// Latency reported by the planner (measured or replayed from a cassette).
    Recorded,
    /// Log-normal latency with the given mean and standard deviation, drawn from the run seed.
    Stochastic { mean: f64, std: f64 },
}

impl LatencyModel {
    fn validate(&self) -> Result<(), SimError> {
        let ok = match *self {
            LatencyModel::Zero | LatencyModel::Recorded => true,
            LatencyModel::Fixed { seconds } => seconds >= 0.0 && seconds.is_finite(),
            LatencyModel::Stochastic { mean, std } => mean > 0.0 && std >= 0.0 && std.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid latency model {self:?}")))
        }
    }

    fn sample(&self, outcome: &PlanOutcome, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LatencyModel::Zero => 0.0,
            LatencyModel::Fixed { seconds } => seconds,
            LatencyModel::Recorded => outcome.latency_s.max(0.0),
            LatencyModel::Stochastic { mean, std } => {
                if std == 0.0 {
                    return mean;
                }
                let s2 = (1.0 + (std / mean).powi(2)).ln();
                let mu = mean.ln() - 0.5 * s2;
                LogNormal::new(mu, s2.sqrt()).unwrap().sample(rng)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt_l: f64,
    pub dt_u: f64,
    pub mode: ClockMode,
    pub latency: LatencyModel,
    pub seed: u64,
    /// Wall-clock seconds per simulated second (wall-clock mode only).
    pub time_scale: f64,
    pub mpc: MpcConfig,
    pub spacing: SpacingPolicy,
    pub perception_noise: Option<PerceptionNoise>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_l: 0.1,
            dt_u: 5.0,
            mode: ClockMode::VirtualTime,
            latency: LatencyModel::Zero,
            seed: 0,
            time_scale: 1.0,
            mpc: MpcConfig::default(),
            spacing: SpacingPolicy::default(),
            perception_noise: None,
        }
    }
}

impl SimConfig {
    /// Control steps per planner period.
    pub fn steps_per_update(&self) -> usize {
        (self.dt_u / self.dt_l).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_l > 0.0 && self.dt_l.is_finite()) {
            return Err(SimError::Config("dt_l must be positive".into()));
        }
        let ratio = self.dt_u / self.dt_l;
        if !(ratio >= 1.0 - 1e-9) || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(SimError::Config(
                "dt_u must be an integer multiple of dt_l".into(),
            ));
        }
        if !(self.time_scale > 0.0) {
            return Err(SimError::Config("time_scale must be positive".into()));
        }
        self.latency.validate()?;
        MpcConfig {
            dt_l: self.dt_l,
            ..self.mpc
        }
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("trace io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("replay diverged: {0}")]
    Diverged(String),
    #[error("replay requested responses missing from the cassette: {0:?}")]
    CassetteMiss(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub scenario_id: String,
    pub features: Features,
    pub duration: f64,
    pub dt_l: f64,
    pub dt_u: f64,
    pub seed: u64,
    pub vehicle_length: f64,
    pub planner: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderRecord {
    /// Front bumper position (m).
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub length: f64,
}

impl LeaderRecord {
    pub fn rear(&self) -> f64 {
        self.x - self.length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    /// Ego front bumper position (m).
    pub x: f64,
    pub v: f64,
    /// Realized acceleration (m/s^2).
    pub a: f64,
    /// Commanded acceleration after actuator limits (m/s^2).
    pub u: f64,
    pub theta: DrivingParams,
    /// Planner event whose parameters are in force.
    pub theta_id: u64,
    pub leader: Option<LeaderRecord>,
    pub stop_line_gap: Option<f64>,
    pub mpc_status: Option<QpStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerEvent {
    pub id: u64,
    pub kind: PromptKind,
    pub request_t: f64,
    /// Simulated arrival time of the response; absent if it never arrived.
    pub response_t: Option<f64>,
    /// Control step at which the parameters took effect; absent if superseded or never due.
    pub applied_t: Option<f64>,
    pub source: ParamSource,
    pub verdict: Option<Verdict>,
    pub theta: DrivingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
    Planner(PlannerEvent),
    Anomaly(Anomaly),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub events: Vec<PlannerEvent>,
    pub anomalies: Vec<Anomaly>,
}

impl SimTrace {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let mut push = |line: TraceLine| {
            out.push_str(&serde_json::to_string(&line).expect("trace records serialize"));
            out.push('\n');
        };
        push(TraceLine::Header(self.header.clone()));
        self.steps.iter().for_each(|s| push(TraceLine::Step(s.clone())));
        self.events.iter().for_each(|e| push(TraceLine::Planner(e.clone())));
        self.anomalies.iter().for_each(|a| push(TraceLine::Anomaly(a.clone())));
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self, SimError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut events = Vec::new();
        let mut anomalies = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(line).map_err(|e| SimError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                TraceLine::Header(h) if header.is_none() => header = Some(h),
                TraceLine::Header(_) => {
                    return Err(SimError::Format {
                        line: i + 1,
                        message: "duplicate header".into(),
                    })
                }
                TraceLine::Step(s) => steps.push(s),
                TraceLine::Planner(e) => events.push(e),
                TraceLine::Anomaly(a) => anomalies.push(a),
            }
        }
        let header = header.ok_or(SimError::Format {
            line: 0,
            message: "missing header".into(),
        })?;
        Ok(Self {
            header,
            steps,
            events,
            anomalies,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), SimError> {
        Ok(crate::io::write_atomic(path.as_ref(), self.to_ndjson().as_bytes())?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, SimError> {
        Self::from_ndjson(&std::fs::read_to_string(path)?)
    }

    pub fn ego_states(&self) -> Vec<VehicleState> {
        self.steps
            .iter()
            .map(|s| VehicleState::new(s.x, s.v, s.a, s.t))
            .collect()
    }

    /// Checks the timing and provenance contract: uniform steps, parameters that change only
    /// when a response is applied, single-response provenance and causality.
    pub fn check_consistency(&self) -> Result<(), String> {
        let dt = self.header.dt_l;
        for (i, s) in self.steps.iter().enumerate() {
            if (s.t - i as f64 * dt).abs() > 1e-9 {
                return Err(format!("step {i} at t={} is off the {dt} s grid", s.t));
            }
        }
        let by_id = |id: u64| self.events.iter().find(|e| e.id == id);
        let mut prev: Option<u64> = None;
        for s in &self.steps {
            let ev = by_id(s.theta_id).ok_or(format!("t={}: unknown theta id {}", s.t, s.theta_id))?;
            if ev.theta != s.theta {
                return Err(format!("t={}: parameters differ from event {}", s.t, ev.id));
            }
            let applied = ev
                .applied_t
                .ok_or(format!("t={}: event {} was never applied", s.t, ev.id))?;
            if applied > s.t + 1e-9 {
                return Err(format!("t={}: event {} applied in the future", s.t, ev.id));
            }
            // the blocking initial call is exempt from the latency check
            let arrived = ev.response_t.is_some_and(|r| r <= s.t + 1e-9);
            if ev.kind == PromptKind::Update && !arrived {
                return Err(format!("t={}: event {} used before it arrived", s.t, ev.id));
            }
            if prev != Some(s.theta_id) {
                if (applied - s.t).abs() > 1e-9 {
                    return Err(format!("t={}: parameters changed without a response", s.t));
                }
                prev = Some(s.theta_id);
            }
        }
        Ok(())
    }
}

/// Runs one scenario to its duration.
pub fn run_scenario(
    scenario: &Scenario,
    planner: &mut dyn Planner,
    cfg: &SimConfig,
) -> Result<SimTrace, SimError> {
    cfg.validate()?;
    match cfg.mode {
        ClockMode::VirtualTime => Ok(run_virtual(scenario, planner, cfg)),
        ClockMode::WallClock => Ok(run_wall_clock(scenario, planner, cfg)),
    }
}

/// Closed loop with fixed parameters and no planner.
pub fn simulate_fixed(scenario: &Scenario, params: &DrivingParams, cfg: &SimConfig) -> SimTrace {
    let mut planner = crate::planner::FixedPlanner::new(*params);
    run_virtual(scenario, &mut planner, cfg)
}

/// Re-runs a recorded virtual-time trace and reports the first divergence.
pub fn replay_trace(
    trace: &SimTrace,
    scenario: &Scenario,
    planner: &mut dyn Planner,
    cfg: &SimConfig,
) -> Result<SimTrace, SimError> {
    let cfg = SimConfig {
        seed: trace.header.seed,
        mode: ClockMode::VirtualTime,
        ..*cfg
    };
    let again = run_scenario(scenario, planner, &cfg)?;
    let misses = planner.replay_misses();
    if !misses.is_empty() {
        return Err(SimError::CassetteMiss(misses));
    }
    if again.header != trace.header {
        return Err(SimError::Diverged("header differs".into()));
    }
    if let Some((a, b)) = again.events.iter().zip(&trace.events).find(|(a, b)| a != b) {
        return Err(SimError::Diverged(format!(
            "planner event {} (request at t={}) differs from recorded event {}",
            a.id, a.request_t, b.id
        )));
    }
    if let Some(s) = again.steps.iter().zip(&trace.steps).find(|(a, b)| a != b) {
        return Err(SimError::Diverged(format!("control step at t={}", s.0.t)));
    }
    if again.steps.len() != trace.steps.len() || again.events.len() != trace.events.len() {
        return Err(SimError::Diverged("record counts differ".into()));
    }
    Ok(again)
}

struct Loop<'a> {
    scenario: &'a Scenario,
    cfg: &'a SimConfig,
    mpc: MpcConfig,
    trajectory: Vec<VehicleState>,
    steps: Vec<StepRecord>,
    anomalies: Vec<Anomaly>,
    last_u: f64,
    noise_rng: ChaCha8Rng,
}

impl<'a> Loop<'a> {
    fn new(scenario: &'a Scenario, cfg: &'a SimConfig) -> Self {
        let mpc = MpcConfig {
            dt_l: cfg.dt_l,
            tau_a: scenario.plant().tau_a,
            ..cfg.mpc
        };
        Self {
            scenario,
            cfg,
            mpc,
            trajectory: vec![scenario.ego_init()],
            steps: Vec::new(),
            anomalies: Vec::new(),
            last_u: 0.0,
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_65),
        }
    }

    fn now(&self) -> VehicleState {
        *self.trajectory.last().unwrap()
    }

    fn scene(&mut self, t: f64) -> crate::scenario::SceneStatus {
        match &self.cfg.perception_noise {
            Some(noise) => encode_scene_noisy(
                &self.trajectory,
                self.scenario,
                t,
                noise,
                &mut self.noise_rng,
            ),
            None => encode_scene(&self.trajectory, self.scenario, t),
        }
    }

    fn control_step(&mut self, i: usize, theta: &DrivingParams, theta_id: u64) {
        let t = i as f64 * self.cfg.dt_l;
        let state = self.now();
        let scene = encode_scene(&self.trajectory, self.scenario, t);
        let observed = if self.cfg.perception_noise.is_some() {
            self.scene(t)
        } else {
            scene.clone()
        };
        let (u, status) = match mpc_step(theta, &observed, &self.mpc, &self.cfg.spacing) {
            Ok((u, sol)) if u.is_finite() => (u, Some(sol.status)),
            Ok(_) => {
                self.anomalies.push(Anomaly {
                    t,
                    message: "non-finite MPC output; holding previous input".into(),
                });
                (self.last_u, None)
            }
            Err(err) => {
                self.anomalies.push(Anomaly {
                    t,
                    message: format!("MPC failed ({err}); holding previous input"),
                });
                (self.last_u, None)
            }
        };
        let u = u.clamp(self.mpc.u_min, self.mpc.u_max);
        self.last_u = u;
        let leader = self.scenario.leader_at(t).map(|(x, v, a)| LeaderRecord {
            x,
            v,
            a,
            length: self.scenario.vehicle_length(),
        });
        self.steps.push(StepRecord {
            t,
            x: state.x,
            v: state.v,
            a: state.a,
            u,
            theta: *theta,
            theta_id,
            leader,
            stop_line_gap: scene.stop_line,
            mpc_status: status,
        });
        let mut next = plant_step(&state, u, &self.scenario.plant(), self.cfg.dt_l);
        next.t = (i + 1) as f64 * self.cfg.dt_l;
        self.trajectory.push(next);
    }

    fn header(&self, planner: &str) -> TraceHeader {
        TraceHeader {
            scenario_id: self.scenario.id().to_string(),
            features: self.scenario.features(),
            duration: self.scenario.duration(),
            dt_l: self.cfg.dt_l,
            dt_u: self.cfg.dt_u,
            seed: self.cfg.seed,
            vehicle_length: self.scenario.vehicle_length(),
            planner: planner.to_string(),
        }
    }

    fn num_steps(&self) -> usize {
        (self.scenario.duration() / self.cfg.dt_l).round() as usize
    }
}

fn event_from(
    id: u64,
    kind: PromptKind,
    request_t: f64,
    response_t: f64,
    outcome: &PlanOutcome,
) -> PlannerEvent {
    PlannerEvent {
        id,
        kind,
        request_t,
        response_t: Some(response_t),
        applied_t: None,
        source: outcome.source,
        verdict: outcome.verdict,
        theta: outcome.params,
        detail: outcome.detail.clone(),
    }
}

fn run_virtual(scenario: &Scenario, planner: &mut dyn Planner, cfg: &SimConfig) -> SimTrace {
    let mut lp = Loop::new(scenario, cfg);
    let mut latency_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_steps = lp.num_steps();
    let per_update = cfg.steps_per_update().max(1);

    let scene0 = lp.scene(0.0);
    let first = planner.plan(&PlanRequest {
        kind: PromptKind::Initial,
        t: 0.0,
        scenario,
        scene: scene0,
        previous: None,
    });
    let mut events = vec![event_from(0, PromptKind::Initial, 0.0, 0.0, &first)];
    events[0].applied_t = Some(0.0);
    let mut theta = first.params;
    let mut theta_id = 0;
    // (event index, arrival time) of the newest outstanding request
    let mut pending: Option<(usize, f64)> = None;

    for i in 0..n_steps {
        let t = i as f64 * cfg.dt_l;
        if i > 0 && i % per_update == 0 {
            let scene = lp.scene(t);
            let outcome = planner.plan(&PlanRequest {
                kind: PromptKind::Update,
                t,
                scenario,
                scene,
                previous: Some(theta),
            });
            let latency = cfg.latency.sample(&outcome, &mut latency_rng);
            let id = events.len() as u64;
            events.push(event_from(id, PromptKind::Update, t, t + latency, &outcome));
            // a newer request supersedes any response still in flight
            pending = Some((events.len() - 1, t + latency));
        }
        if let Some((idx, arrival)) = pending {
            if arrival <= t + 1e-9 {
                events[idx].applied_t = Some(t);
                theta = events[idx].theta;
                theta_id = events[idx].id;
                pending = None;
            }
        }
        lp.control_step(i, &theta, theta_id);
    }

    SimTrace {
        header: lp.header(planner.name()),
        steps: lp.steps,
        events,
        anomalies: lp.anomalies,
    }
}

struct Job<'s> {
    id: u64,
    request: PlanRequest<'s>,
}

struct Delivery {
    id: u64,
    outcome: PlanOutcome,
    latency_s: f64,
}

fn run_wall_clock(scenario: &Scenario, planner: &mut dyn Planner, cfg: &SimConfig) -> SimTrace {
    let mut lp = Loop::new(scenario, cfg);
    let n_steps = lp.num_steps();
    let per_update = cfg.steps_per_update().max(1);
    let mut latency_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let scene0 = lp.scene(0.0);
    let start = Instant::now();
    let first = planner.plan(&PlanRequest {
        kind: PromptKind::Initial,
        t: 0.0,
        scenario,
        scene: scene0,
        previous: None,
    });
    let first_latency = start.elapsed().as_secs_f64() / cfg.time_scale;
    let mut events = vec![event_from(0, PromptKind::Initial, 0.0, first_latency, &first)];
    events[0].applied_t = Some(0.0);
    let name = planner.name().to_string();

    let slot: Arc<Mutex<Option<Delivery>>> = Arc::new(Mutex::new(None));
    let cancel = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Job>();

    std::thread::scope(|s| {
        let worker_slot = Arc::clone(&slot);
        let worker_cancel = Arc::clone(&cancel);
        let latency = cfg.latency;
        let scale = cfg.time_scale;
        s.spawn(move || {
            while let Ok(mut job) = rx.recv() {
                // only the newest queued request is worth answering
                while let Ok(newer) = rx.try_recv() {
                    job = newer;
                }
                if worker_cancel.load(Ordering::SeqCst) {
                    break;
                }
                let began = Instant::now();
                let outcome = planner.plan(&job.request);
                let injected = match latency {
                    LatencyModel::Recorded => 0.0,
                    other => other.sample(&outcome, &mut latency_rng),
                };
                let target = Duration::from_secs_f64(injected * scale);
                while began.elapsed() < target {
                    if worker_cancel.load(Ordering::SeqCst) {
                        return;
                    }
                    std::thread::sleep(Duration::from_millis(1).min(target));
                }
                if worker_cancel.load(Ordering::SeqCst) {
                    break;
                }
                let latency_s = began.elapsed().as_secs_f64() / scale;
                *worker_slot.lock().unwrap() = Some(Delivery {
                    id: job.id,
                    outcome,
                    latency_s,
                });
            }
        });

        let mut theta = events[0].theta;
        let mut theta_id = 0;
        let mut newest_issued = 0;
        let loop_start = Instant::now();
        for i in 0..n_steps {
            let t = i as f64 * cfg.dt_l;
            let due = loop_start + Duration::from_secs_f64(t * cfg.time_scale);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            if i > 0 && i % per_update == 0 {
                let id = events.len() as u64;
                let request = PlanRequest {
                    kind: PromptKind::Update,
                    t,
                    scenario,
                    scene: lp.scene(t),
                    previous: Some(theta),
                };
                // placeholder until the response lands
                events.push(PlannerEvent {
                    id,
                    kind: PromptKind::Update,
                    request_t: t,
                    response_t: None,
                    applied_t: None,
                    source: ParamSource::Response,
                    verdict: None,
                    theta,
                    detail: Some("no response before the run ended".into()),
                });
                newest_issued = id;
                let _ = tx.send(Job { id, request });
            }
            if let Some(d) = slot.lock().unwrap().take() {
                let ev = &mut events[d.id as usize];
                // the control loop's step clock is the simulated clock: a response counts as
                // arrived at the step that observes it
                let mut filled = event_from(d.id, PromptKind::Update, ev.request_t, t, &d.outcome);
                filled.detail = Some(format!("measured latency {:.3} s", d.latency_s));
                if d.id == newest_issued {
                    filled.applied_t = Some(t);
                    theta = filled.theta;
                    theta_id = d.id;
                } else {
                    filled.detail = Some(format!(
                        "superseded by a newer request (measured latency {:.3} s)",
                        d.latency_s
                    ));
                }
                *ev = filled;
            }
            lp.control_step(i, &theta, theta_id);
        }
        cancel.store(true, Ordering::SeqCst);
        drop(tx);
    });

    SimTrace {
        header: lp.header(&name),
        steps: lp.steps,
        events,
        anomalies: lp.anomalies,
    }
}

/// A scripted follower that commands full throttle or full braking depending on whether
/// the gap exceeds the desired spacing, with no speed or smoothness objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BangBangFollower {
    pub h_d: f64,
    pub d_0: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for BangBangFollower {
    fn default() -> Self {
        let m = MpcConfig::default();
        Self {
            h_d: 2.6,
            d_0: SpacingPolicy::default().d_0,
            v_max: m.v_max,
            u_min: m.u_min,
            u_max: m.u_max,
        }
    }
}

impl BangBangFollower {
    pub fn command(&self, state: &VehicleState, scene: &crate::scenario::SceneStatus) -> f64 {
        let leader = crate::mpc::resolve_leader(scene);
        let room = if leader.exists() {
            leader.x_ref - self.d_0 - self.h_d * state.v
        } else {
            f64::INFINITY
        };
        if room > 0.0 && state.v < self.v_max {
            self.u_max
        } else if state.v > 0.0 {
            self.u_min
        } else {
            0.0
        }
    }

    /// Drives the scenario with the same plant and step as the MPC loop.
    pub fn run(&self, scenario: &Scenario, dt_l: f64) -> Vec<VehicleState> {
        let n = (scenario.duration() / dt_l).round() as usize;
        let mut traj = vec![scenario.ego_init()];
        for i in 0..n {
            let t = i as f64 * dt_l;
            let state = *traj.last().unwrap();
            let scene = encode_scene(&traj, scenario, t);
            let u = self.command(&state, &scene);
            let mut next = plant_step(&state, u, &scenario.plant(), dt_l);
            next.t = (i + 1) as f64 * dt_l;
            traj.push(next);
        }
        traj.pop();
        traj
    }
}
