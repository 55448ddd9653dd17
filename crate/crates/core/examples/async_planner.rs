//! Two-rate loop: a slow planner whose answers land 3.42 s after each request.

use drive_mpc::mpc::DrivingParams;
use drive_mpc::planner::ScriptedPlanner;
use drive_mpc::scenario::load_scenario;
use drive_mpc::simulator::{run_scenario, LatencyModel, SimConfig};

fn main() {
    let scenario = load_scenario(
        r#"{"id": "cruise", "ego_init": {"x": 0, "v": 3}, "duration": 20,
            "leader_track": [{"t": 0, "x": 40, "v": 7}, {"t": 20, "x": 180, "v": 7}]}"#,
    )
    .unwrap();
    let mut planner = ScriptedPlanner::new(vec![
        DrivingParams::new(9, 1.68, 2.75, 6.44, 2.60),
        DrivingParams::new(10, 2.0, 3.5, 6.5, 2.8),
        DrivingParams::new(8, 1.15, 1.99, 5.09, 2.55),
        DrivingParams::new(9, 1.68, 1.99, 5.09, 2.55),
    ]);
    let cfg = SimConfig {
        latency: LatencyModel::Fixed { seconds: 3.42 },
        ..SimConfig::default()
    };
    let trace = run_scenario(&scenario, &mut planner, &cfg).unwrap();
    for e in &trace.events {
        println!(
            "request {:>2} at {:>5.1} s -> applied at {:>5}  v_d {:.2}",
            e.id,
            e.request_t,
            e.applied_t.map_or("never".to_string(), |t| format!("{t:.1} s")),
            e.theta.v_d
        );
    }
    println!("{} control steps, consistency: {:?}", trace.steps.len(), trace.check_consistency());
}
