//! Post-hoc trace metrics: post-encroachment time, RMS acceleration, completion and latency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::planner::CompletionLedger;
use crate::scenario::Features;
use crate::simulator::SimTrace;

/// Spatial sampling of leader-vacated points (m).
pub const PET_RESOLUTION: f64 = 0.1;

/// PET below this is reported as unsafe; it never affects control.
pub const PET_THRESHOLD: f64 = 1.0;

/// First time the piecewise-linear track `xs(ts)` reaches `p` (strictly exceeds it when
/// `strict`), scanning from sample `from`. Returns the interpolated time and the segment index.
fn first_passage(ts: &[f64], xs: &[f64], p: f64, strict: bool, from: usize) -> Option<(f64, usize)> {
    let past = |x: f64| if strict { x > p } else { x >= p };
    if from == 0 && past(xs[0]) {
        return Some((ts[0], 0));
    }
    for k in from.max(1)..xs.len() {
        if past(xs[k]) {
            let (x0, x1) = (xs[k - 1], xs[k]);
            let w = if x1 > x0 { ((p - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 1.0 };
            return Some((ts[k - 1] + w * (ts[k] - ts[k - 1]), k));
        }
    }
    None
}

/// Points vacated by the leader's rear and later reached by the ego's front, with their PET.
///
/// Points are sampled every `resolution` metres from the leader's initial rear bumper.
pub fn pet_profile(trace: &SimTrace, resolution: f64) -> Vec<(f64, f64)> {
    let with_leader: Vec<_> = trace
        .steps
        .iter()
        .filter_map(|s| s.leader.map(|l| (s.t, l.rear(), s.x)))
        .collect();
    if with_leader.len() < 2 {
        return Vec::new();
    }
    let ts: Vec<f64> = with_leader.iter().map(|s| s.0).collect();
    let rear: Vec<f64> = with_leader.iter().map(|s| s.1).collect();
    let front: Vec<f64> = with_leader.iter().map(|s| s.2).collect();

    let start = rear[0];
    let far = rear.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    // first-passage times are non-decreasing in p, so both scans resume where they left off
    let (mut k1, mut k2) = (0, 0);
    for i in 0.. {
        let p = start + i as f64 * resolution;
        if p >= far {
            break;
        }
        let Some((t1, j1)) = first_passage(&ts, &rear, p, true, k1) else { break };
        k1 = j1;
        let Some((t2, j2)) = first_passage(&ts, &front, p, false, k2) else { break };
        k2 = j2;
        out.push((p, t2 - t1));
    }
    out
}

/// Minimum PET over leader-vacated points; `None` if the ego reaches none of them.
pub fn compute_pet(trace: &SimTrace) -> Option<f64> {
    pet_profile(trace, PET_RESOLUTION)
        .into_iter()
        .map(|(_, pet)| pet)
        .reduce(f64::min)
}

/// Root mean square of the realized acceleration over all control steps.
pub fn compute_rms_a(trace: &SimTrace) -> f64 {
    rms(trace.steps.iter().map(|s| s.a))
}

pub fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (n, sq) = values.into_iter().fold((0usize, 0.0), |(n, sq), a| (n + 1, sq + a * a));
    if n == 0 {
        0.0
    } else {
        (sq / n as f64).sqrt()
    }
}

/// Mean and nearest-rank 95th percentile.
pub fn latency_stats(samples: &[f64]) -> Option<(f64, f64)> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).max(1);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Some((mean, sorted[rank - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario_id: String,
    pub features: Features,
    pub min_pet: Option<f64>,
    pub rms_a: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    /// Smallest bumper-to-bumper gap to the leader (m).
    pub min_gap: Option<f64>,
    pub steps: usize,
    pub planner_failures: usize,
}

impl ScenarioMetrics {
    pub fn from_trace(trace: &SimTrace) -> Self {
        let accel = trace.steps.iter().map(|s| s.a);
        let min_gap = trace
            .steps
            .iter()
            .filter_map(|s| s.leader.map(|l| l.rear() - s.x))
            .reduce(f64::min);
        Self {
            scenario_id: trace.header.scenario_id.clone(),
            features: trace.header.features,
            min_pet: compute_pet(trace),
            rms_a: compute_rms_a(trace),
            accel_min: accel.clone().fold(f64::INFINITY, f64::min),
            accel_max: accel.fold(f64::NEG_INFINITY, f64::max),
            min_gap,
            steps: trace.steps.len(),
            planner_failures: trace
                .events
                .iter()
                .filter(|e| e.verdict.is_some_and(|v| v != crate::planner::Verdict::Valid))
                .count(),
        }
    }

    pub fn pet_safe(&self) -> Option<bool> {
        self.min_pet.map(|p| p >= PET_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollup {
    pub scenes: usize,
    pub min_pet: Option<f64>,
    pub mean_rms_a: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub completion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenarios: Vec<ScenarioMetrics>,
    /// Keyed by feature tag; cells without scenes are absent.
    pub groups: BTreeMap<String, GroupRollup>,
    pub completion: f64,
    pub latency_mean: Option<f64>,
    pub latency_p95: Option<f64>,
    pub ledger: CompletionLedger,
}

/// Rolls scenario metrics up per feature cell. Scenarios are sorted by id.
pub fn aggregate(mut scenarios: Vec<ScenarioMetrics>, ledger: &CompletionLedger) -> MetricsReport {
    scenarios.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
    let complete = |id: &str| ledger.scenarios.get(id).is_none_or(|c| c.failures() == 0);
    let mut groups = BTreeMap::new();
    for f in Features::all() {
        let members: Vec<&ScenarioMetrics> = scenarios.iter().filter(|s| s.features == f).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        groups.insert(
            f.tag(),
            GroupRollup {
                scenes: members.len(),
                min_pet: members.iter().filter_map(|s| s.min_pet).reduce(f64::min),
                mean_rms_a: members.iter().map(|s| s.rms_a).sum::<f64>() / n,
                accel_min: members.iter().map(|s| s.accel_min).fold(f64::INFINITY, f64::min),
                accel_max: members.iter().map(|s| s.accel_max).fold(f64::NEG_INFINITY, f64::max),
                completion: members.iter().filter(|s| complete(&s.scenario_id)).count() as f64 / n,
            },
        );
    }
    let latency = latency_stats(&ledger.latencies);
    MetricsReport {
        scenarios,
        groups,
        completion: ledger.completion_rate(),
        latency_mean: latency.map(|l| l.0),
        latency_p95: latency.map(|l| l.1),
        ledger: ledger.clone(),
    }
}

/// Report from traces alone: metrics per trace and a ledger rebuilt from their event logs.
pub fn report_from_traces(traces: &[SimTrace]) -> MetricsReport {
    let metrics = traces.iter().map(ScenarioMetrics::from_trace).collect();
    aggregate(metrics, &CompletionLedger::from_traces(traces))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Flat table: one row per metric, one column per feature cell.
    pub fn to_csv(&self) -> String {
        let tags: Vec<String> = Features::all().map(|f| f.tag()).collect();
        let mut out = format!("metric,{}\n", tags.join(","));
        let rows: [(&str, fn(&GroupRollup) -> Option<f64>); 6] = [
            ("scenes", |g| Some(g.scenes as f64)),
            ("min_pet_s", |g| g.min_pet),
            ("rms_a_mps2", |g| Some(g.mean_rms_a)),
            ("accel_min_mps2", |g| Some(g.accel_min)),
            ("accel_max_mps2", |g| Some(g.accel_max)),
            ("completion", |g| Some(g.completion)),
        ];
        for (name, get) in rows {
            out.push_str(name);
            for t in &tags {
                out.push(',');
                if let Some(v) = self.groups.get(t).and_then(get) {
                    if name == "scenes" {
                        out.push_str(&format!("{}", v as usize));
                    } else {
                        out.push_str(&format!("{v:.4}"));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
