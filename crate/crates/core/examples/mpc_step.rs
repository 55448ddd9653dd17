//! One receding-horizon solve behind a slower leader.

use drive_mpc::dynamics::VehicleState;
use drive_mpc::mpc::{mpc_step, DrivingParams, MpcConfig, SpacingPolicy};
use drive_mpc::scenario::{LeaderState, SceneStatus};

fn main() {
    let params = DrivingParams::new(9, 1.68, 2.75, 6.44, 2.60);
    let cfg = MpcConfig::default();
    let policy = SpacingPolicy::default();
    for gap in [8.0, 15.0, 25.0, 40.0] {
        let scene = SceneStatus {
            ego_history: vec![VehicleState::new(0.0, 6.0, 0.0, 0.0); 6],
            leader: Some(LeaderState {
                gap,
                v: 4.0,
                a: 0.0,
                length: 4.5,
            }),
            stop_line: None,
        };
        let (u, sol) = mpc_step(&params, &scene, &cfg, &policy).expect("feasible");
        println!(
            "gap {gap:>5.1} m: u0 = {u:+.3} m/s^2, cost {:.3}, kkt {:.1e}, slacks {:?}",
            sol.cost, sol.kkt_residual, sol.slack
        );
    }
}
