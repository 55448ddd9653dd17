//! Braking-leader suite with the grouped memory, against a bang-bang follower.

use drive_mpc::memory::Memory;
use drive_mpc::metrics::{rms, ScenarioMetrics, PET_THRESHOLD};
use drive_mpc::planner::MemoryPlanner;
use drive_mpc::simulator::{run_scenario, BangBangFollower, SimConfig};
use drive_mpc::suite::braking_suite;

fn main() {
    let cfg = SimConfig::default();
    let memory = Memory::builtin();
    println!("{:<14} {:>8} {:>9} {:>8} {:>10}", "scene", "min PET", "min gap", "RMS a", "bang-bang");
    for scenario in braking_suite() {
        let mut planner = MemoryPlanner::new(memory.clone());
        let trace = run_scenario(&scenario, &mut planner, &cfg).expect("valid config");
        let m = ScenarioMetrics::from_trace(&trace);
        let baseline = BangBangFollower::default().run(&scenario, cfg.dt_l);
        let flag = if m.min_pet.is_some_and(|p| p < PET_THRESHOLD) { " unsafe" } else { "" };
        println!(
            "{:<14} {:>8.2} {:>9.2} {:>8.3} {:>10.3}{flag}",
            scenario.id(),
            m.min_pet.unwrap_or(f64::NAN),
            m.min_gap.unwrap_or(f64::NAN),
            m.rms_a,
            rms(baseline.iter().map(|s| s.a)),
        );
    }
}
