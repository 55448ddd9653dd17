//! Scenario files and the scene encoder.
//!
//! A scenario is a 1-D longitudinal description of one scene: the ego's initial state, an
//! optional recorded leader track, an optional stop line, and fixtures for the environment
//! encoder. Positions are lane coordinates in metres.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{PlantParams, VehicleState, DEFAULT_VEHICLE_LENGTH};
use crate::environment::EnvDescription;

/// Number of past samples in the ego history (the window holds `HISTORY_LEN + 1` states).
pub const HISTORY_LEN: usize = 5;
/// Spacing of the ego history samples (s).
pub const HISTORY_SPACING: f64 = 0.5;

/// Boolean scene features used to key the reference memory.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(deny_unknown_fields)]
pub struct Features {
    pub rain: bool,
    pub intersection: bool,
    pub night: bool,
}

impl Features {
    pub const fn new(rain: bool, intersection: bool, night: bool) -> Self {
        Self {
            rain,
            intersection,
            night,
        }
    }

    /// Cell index `4 rain + 2 intersection + night`.
    pub fn index(&self) -> usize {
        (self.rain as usize) * 4 + (self.intersection as usize) * 2 + self.night as usize
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < 8, "feature cell index {i} out of range");
        Self::new(i & 4 != 0, i & 2 != 0, i & 1 != 0)
    }

    /// All eight cells in index order.
    pub fn all() -> impl Iterator<Item = Features> {
        (0..8).map(Self::from_index)
    }

    /// Short tag such as `r1i0n1`.
    pub fn tag(&self) -> String {
        format!(
            "r{}i{}n{}",
            self.rain as u8, self.intersection as u8, self.night as u8
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub x: f64,
    pub v: f64,
    #[serde(default)]
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSample {
    pub t: f64,
    /// Front-bumper position (m).
    pub x: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub t: f64,
    pub id: String,
}

/// Plant section of a scenario file; missing fields take the crate defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(rename = "K_d", default, skip_serializing_if = "Option::is_none")]
    pub drag_coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_m: Option<f64>,
    #[serde(rename = "tau_A", default, skip_serializing_if = "Option::is_none")]
    pub tau_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
}

/// On-disk scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub id: String,
    #[serde(default)]
    pub features: Features,
    pub ego_init: InitialState,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub leader_track: Vec<LeaderSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_line_x: Option<f64>,
    /// Time at which the stop line stops applying (signal turns green).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_line_clear_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_tags: Option<EnvDescription>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<ImageRef>,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// A validated scenario. Immutable after loading.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    doc: ScenarioDoc,
    plant: PlantParams,
    vehicle_length: f64,
}

impl Scenario {
    pub fn from_doc(doc: ScenarioDoc) -> Result<Self, ScenarioError> {
        if doc.id.trim().is_empty() {
            return Err(invalid("id", "must not be empty"));
        }
        if !(doc.duration > 0.0 && doc.duration.is_finite()) {
            return Err(invalid("duration", "must be positive"));
        }
        let e = &doc.ego_init;
        if !(e.x.is_finite() && e.v.is_finite() && e.a.is_finite()) {
            return Err(invalid("ego_init", "must be finite"));
        }
        if e.v < 0.0 {
            return Err(invalid("ego_init.v", "must be non-negative"));
        }
        for s in &doc.leader_track {
            if !(s.t.is_finite() && s.x.is_finite() && s.v.is_finite()) {
                return Err(invalid("leader_track", "samples must be finite"));
            }
            if s.v < 0.0 {
                return Err(invalid("leader_track.v", "must be non-negative"));
            }
        }
        if doc.leader_track.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(invalid("leader_track.t", "not increasing"));
        }
        if let Some(x) = doc.stop_line_x {
            if !x.is_finite() {
                return Err(invalid("stop_line_x", "must be finite"));
            }
        }
        if doc.image_refs.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(invalid("image_refs.t", "not non-decreasing"));
        }
        let spec = doc.plant.unwrap_or(PlantSpec {
            m: None,
            drag_coeff: None,
            d_m: None,
            tau_a: None,
            length: None,
        });
        let defaults = PlantParams::default();
        let plant = PlantParams {
            drag_coeff: spec.drag_coeff.unwrap_or(defaults.drag_coeff),
            m: spec.m.unwrap_or(defaults.m),
            tau_a: spec.tau_a.unwrap_or(defaults.tau_a),
            d_m: spec.d_m.unwrap_or(defaults.d_m),
        };
        plant
            .validate()
            .map_err(|err| invalid("plant", err.to_string()))?;
        let vehicle_length = spec.length.unwrap_or(DEFAULT_VEHICLE_LENGTH);
        if !(vehicle_length > 0.0) {
            return Err(invalid("plant.length", "must be positive"));
        }
        Ok(Self {
            doc,
            plant,
            vehicle_length,
        })
    }

    pub fn doc(&self) -> &ScenarioDoc {
        &self.doc
    }

    pub fn id(&self) -> &str {
        &self.doc.id
    }

    pub fn features(&self) -> Features {
        self.doc.features
    }

    pub fn duration(&self) -> f64 {
        self.doc.duration
    }

    pub fn plant(&self) -> PlantParams {
        self.plant
    }

    /// Vehicle length, also assumed for the preceding vehicle.
    pub fn vehicle_length(&self) -> f64 {
        self.vehicle_length
    }

    pub fn ego_init(&self) -> VehicleState {
        let e = self.doc.ego_init;
        VehicleState::new(e.x, e.v, e.a, 0.0)
    }

    pub fn env_tags(&self) -> Option<&EnvDescription> {
        self.doc.env_tags.as_ref()
    }

    pub fn has_leader(&self) -> bool {
        !self.doc.leader_track.is_empty()
    }

    /// Latest camera frame at or before `t`, falling back to the first one.
    pub fn image_at(&self, t: f64) -> Option<&str> {
        let refs = &self.doc.image_refs;
        refs.iter()
            .rev()
            .find(|r| r.t <= t + 1e-9)
            .or(refs.first())
            .map(|r| r.id.as_str())
    }

    /// Leader `(x, v, a)` at time `t`, linear between samples; absent outside the track.
    pub fn leader_at(&self, t: f64) -> Option<(f64, f64, f64)> {
        let track = &self.doc.leader_track;
        let first = track.first()?;
        let last = track.last()?;
        if t < first.t - 1e-9 || t > last.t + 1e-9 {
            return None;
        }
        if track.len() == 1 {
            return Some((first.x, first.v, 0.0));
        }
        let idx = track.partition_point(|s| s.t <= t).clamp(1, track.len() - 1);
        let (s0, s1) = (track[idx - 1], track[idx]);
        let span = s1.t - s0.t;
        let w = ((t - s0.t) / span).clamp(0.0, 1.0);
        let x = s0.x + w * (s1.x - s0.x);
        let v = s0.v + w * (s1.v - s0.v);
        Some((x, v, (s1.v - s0.v) / span))
    }

    /// Stop-line position if the line applies at time `t`.
    pub fn stop_line_at(&self, t: f64) -> Option<f64> {
        let x = self.doc.stop_line_x?;
        match self.doc.stop_line_clear_t {
            Some(clear) if t >= clear => None,
            _ => Some(x),
        }
    }
}

pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let doc: ScenarioDoc = serde_json::from_str(text)?;
    Scenario::from_doc(doc)
}

pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_scenario(&text)
}

pub fn serialize_scenario(scenario: &Scenario) -> String {
    serde_json::to_string_pretty(scenario.doc()).expect("scenario documents always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderState {
    /// Leader front position minus ego front position (m).
    pub gap: f64,
    pub v: f64,
    pub a: f64,
    pub length: f64,
}

/// Observation handed to the planner and the MPC; gaps are relative to the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStatus {
    /// Ego states at `t - 5 dt, ..., t - dt, t`, oldest first.
    pub ego_history: Vec<VehicleState>,
    pub leader: Option<LeaderState>,
    /// Distance from the ego to the stop line (m), present only while positive.
    pub stop_line: Option<f64>,
}

impl SceneStatus {
    pub fn ego(&self) -> Option<&VehicleState> {
        self.ego_history.last()
    }
}

/// Additive Gaussian perception noise on leader gap and speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionNoise {
    pub gap_std: f64,
    pub speed_std: f64,
}

/// Ego state at time `t` from a trajectory sampled in time order; times before the first
/// sample replicate it.
fn ego_state_at(trajectory: &[VehicleState], t: f64) -> VehicleState {
    let first = trajectory[0];
    if t <= first.t {
        return VehicleState { t, ..first };
    }
    let idx = trajectory.partition_point(|s| s.t <= t + 1e-9);
    let prev = trajectory[idx - 1];
    if (prev.t - t).abs() <= 1e-9 || idx == trajectory.len() {
        return VehicleState { t, ..prev };
    }
    let next = trajectory[idx];
    let w = (t - prev.t) / (next.t - prev.t);
    VehicleState::new(
        prev.x + w * (next.x - prev.x),
        prev.v + w * (next.v - prev.v),
        prev.a + w * (next.a - prev.a),
        t,
    )
}

/// Builds the scene status at time `t` from the ego trajectory so far.
///
/// `trajectory` must be non-empty and ordered by time; its last entry is the current state.
pub fn encode_scene(trajectory: &[VehicleState], scenario: &Scenario, t: f64) -> SceneStatus {
    assert!(!trajectory.is_empty(), "encode_scene needs at least one ego state");
    let ego_history: Vec<VehicleState> = (0..=HISTORY_LEN)
        .rev()
        .map(|k| ego_state_at(trajectory, t - k as f64 * HISTORY_SPACING))
        .collect();
    let ego = ego_history[HISTORY_LEN];
    let leader = scenario.leader_at(t).map(|(x, v, a)| LeaderState {
        gap: x - ego.x,
        v,
        a,
        length: scenario.vehicle_length(),
    });
    let stop_line = scenario
        .stop_line_at(t)
        .map(|x| x - ego.x)
        .filter(|gap| *gap > 0.0);
    SceneStatus {
        ego_history,
        leader,
        stop_line,
    }
}

/// [`encode_scene`] followed by additive Gaussian noise on the leader observation.
pub fn encode_scene_noisy<R: Rng>(
    trajectory: &[VehicleState],
    scenario: &Scenario,
    t: f64,
    noise: &PerceptionNoise,
    rng: &mut R,
) -> SceneStatus {
    let mut scene = encode_scene(trajectory, scenario, t);
    if let Some(leader) = scene.leader.as_mut() {
        if noise.gap_std > 0.0 {
            leader.gap += Normal::new(0.0, noise.gap_std).unwrap().sample(rng);
        }
        if noise.speed_std > 0.0 {
            let dv = Normal::new(0.0, noise.speed_std).unwrap().sample(rng);
            leader.v = (leader.v + dv).max(0.0);
        }
    }
    scene
}

/// Two-decimal formatting without a negative zero.
pub(crate) fn fmt2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

/// Deterministic text rendering of a scene for the planner prompt.
pub fn render_scene_text(scene: &SceneStatus) -> String {
    let mut out = String::new();
    out.push_str("Ego vehicle state history (oldest first):\n");
    for s in &scene.ego_history {
        let _ = writeln!(
            out,
            "  t={} s: position {} m, speed {} m/s, acceleration {} m/s^2",
            fmt2(s.t),
            fmt2(s.x),
            fmt2(s.v),
            fmt2(s.a)
        );
    }
    if let Some(l) = &scene.leader {
        let _ = writeln!(
            out,
            "Preceding vehicle: {} m ahead, speed {} m/s, acceleration {} m/s^2",
            fmt2(l.gap),
            fmt2(l.v),
            fmt2(l.a)
        );
    }
    if let Some(gap) = scene.stop_line {
        let _ = writeln!(out, "Stop line: {} m ahead", fmt2(gap));
    }
    out
}
