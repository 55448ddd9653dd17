//! Calibrating scenes against reference runs and grouping the fitted parameters.
//!
//! References come from simulating known parameter vectors, so the fit should land on them.

use drive_mpc::memory::{
    build_groups, calibrate_scene, reference_from_trace, significance_matrix, CalibrationOptions, Memory, MemoryEntry,
};
use drive_mpc::mpc::DrivingParams;
use drive_mpc::simulator::simulate_fixed;
use drive_mpc::suite::excitation_scene;

fn main() {
    let opts = CalibrationOptions::default();
    let truths = [
        DrivingParams::new(9, 1.75, 2.75, 6.5, 2.6),
        DrivingParams::new(9, 1.75, 2.0, 5.0, 2.5),
        DrivingParams::new(7, 1.25, 2.0, 5.0, 2.5),
    ];
    let mut entries = Vec::new();
    for (i, truth) in truths.iter().enumerate() {
        let scenario = excitation_scene(&format!("fit-{i}"), 40 + i as u64, truth, &opts.sim);
        let reference = reference_from_trace(&simulate_fixed(&scenario, truth, &opts.sim));
        let cal = calibrate_scene(&scenario, &reference, &opts).expect("calibration");
        println!("true {:?}\nfit  {:?}  rmse {:.1e} m, {} runs", truth.to_array(), cal.params.to_array(), cal.rmse, cal.evaluations);
        entries.push(MemoryEntry {
            scenario_id: scenario.id().to_string(),
            features: scenario.features(),
            params: cal.params,
        });
    }
    let pvals = significance_matrix(&entries);
    let memory = Memory::new(build_groups(&entries, &pvals, 0.05).unwrap()).unwrap();
    println!("{}", memory.to_json());
}
