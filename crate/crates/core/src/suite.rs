//! Generated scenarios: a braking-leader suite with one scene per feature cell, and
//! excitation scenes for calibration studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mpc::DrivingParams;
use crate::scenario::{Features, InitialState, LeaderSample, Scenario, ScenarioDoc};
use crate::simulator::{simulate_fixed, SimConfig};

/// Piecewise-constant-acceleration leader motion sampled every `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderProfile {
    pub x0: f64,
    pub v0: f64,
    /// `(duration, acceleration)` segments; speed is floored at zero.
    pub segments: Vec<(f64, f64)>,
}

impl LeaderProfile {
    pub fn sample(&self, duration: f64, dt: f64) -> Vec<LeaderSample> {
        let steps = (duration / dt).round() as usize;
        let accel_at = |t: f64| {
            let mut start = 0.0;
            for &(len, a) in &self.segments {
                if t < start + len - 1e-9 {
                    return a;
                }
                start += len;
            }
            0.0
        };
        let (mut x, mut v) = (self.x0, self.v0);
        let mut out = vec![LeaderSample { t: 0.0, x, v }];
        // exact integration over each sample interval, sub-stepped at segment and stop boundaries
        let sub = 20;
        for k in 0..steps {
            let t0 = k as f64 * dt;
            let h = dt / sub as f64;
            for j in 0..sub {
                let a = accel_at(t0 + (j as f64 + 0.5) * h);
                if v + a * h < 0.0 {
                    x += v * v / (2.0 * -a);
                    v = 0.0;
                } else {
                    x += v * h + 0.5 * a * h * h;
                    v += a * h;
                }
            }
            out.push(LeaderSample {
                t: (k + 1) as f64 * dt,
                x,
                v,
            });
        }
        out
    }
}

fn scene(id: String, features: Features, ego: InitialState, leader: &LeaderProfile, duration: f64) -> Scenario {
    Scenario::from_doc(ScenarioDoc {
        id,
        features,
        ego_init: ego,
        leader_track: leader.sample(duration, 0.1),
        stop_line_x: None,
        stop_line_clear_t: None,
        env_tags: None,
        image_refs: vec![],
        duration,
        plant: None,
    })
    .expect("generated scenario is valid")
}

/// One scene per feature cell: the leader cruises, brakes at -2 m/s^2 and recovers.
///
/// Cruise speed, braking length and initial spacing vary by cell.
pub fn braking_suite() -> Vec<Scenario> {
    Features::all()
        .map(|f| {
            let i = f.index() as f64;
            let cruise = 6.0 + 0.25 * i;
            let brake_len = 1.5 + 0.25 * i;
            let recover = 2.0 * brake_len / 1.0;
            let leader = LeaderProfile {
                x0: 25.0 + i,
                v0: cruise,
                segments: vec![(12.0, 0.0), (brake_len, -2.0), (4.0, 0.0), (recover, 1.0)],
            };
            scene(
                format!("brake-{}", f.tag()),
                f,
                InitialState {
                    x: 0.0,
                    v: cruise - 1.0,
                    a: 0.0,
                },
                &leader,
                40.0,
            )
        })
        .collect()
}

/// Scene that excites every parameter of a controller driving with `params`: a free-road
/// phase from an off-target start, then a leader cutting in ahead of where that controller
/// is, braking to a crawl and pulling away again.
pub fn excitation_scene(id: &str, seed: u64, params: &DrivingParams, cfg: &SimConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Features::from_index(rng.gen_range(0..8));
    let ego = InitialState {
        x: 0.0,
        v: rng.gen_range(0.5..2.0),
        a: 0.0,
    };
    let cut_in = 10.0;
    let free = scene(format!("{id}-free"), features, ego, &LeaderProfile { x0: 0.0, v0: 0.0, segments: vec![] }, cut_in);
    let free = Scenario::from_doc(ScenarioDoc {
        leader_track: vec![],
        ..free.doc().clone()
    })
    .expect("valid");
    let trace = simulate_fixed(&free, params, cfg);
    let last = trace.steps.last().expect("non-empty run");
    let (x, v) = (last.x + last.v * cfg.dt_l, last.v);

    let v0 = 0.8 * v;
    let slow = rng.gen_range(0.5..1.5);
    let brake = rng.gen_range(-2.5..-1.5);
    let leader = LeaderProfile {
        x0: x + rng.gen_range(8.0..12.0) + 1.2 * v + 4.5,
        v0,
        segments: vec![(3.0, 0.0), ((slow - v0).min(0.0) / brake, brake), (6.0, 0.0), (6.0, 1.0)],
    };
    let duration = 35.0;
    let mut track = leader.sample(duration - cut_in, 0.1);
    for s in &mut track {
        s.t += cut_in;
    }
    Scenario::from_doc(ScenarioDoc {
        id: id.to_string(),
        leader_track: track,
        duration,
        ..free.doc().clone()
    })
    .expect("generated scenario is valid")
}
