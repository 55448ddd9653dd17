//! Writes scenario files and reference trajectories for the command-line tool.
//!
//! `cargo run --example write_suite -- <dir>` creates `<dir>/scenes/*.json` (the braking
//! suite), `<dir>/calibration/*.json` (calibration scenes) and `<dir>/refs/<id>.json`.

use std::path::PathBuf;

use drive_mpc::memory::{reference_from_trace, Memory};
use drive_mpc::scenario::{serialize_scenario, Scenario, ScenarioDoc};
use drive_mpc::simulator::{simulate_fixed, SimConfig};
use drive_mpc::suite::{braking_suite, excitation_scene};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "suite".into()));
    let (scenes, calib, refs) = (dir.join("scenes"), dir.join("calibration"), dir.join("refs"));
    for d in [&scenes, &calib, &refs] {
        std::fs::create_dir_all(d)?;
    }
    for s in braking_suite() {
        std::fs::write(scenes.join(format!("{}.json", s.id())), serialize_scenario(&s))?;
    }
    let cfg = SimConfig::default();
    let memory = Memory::builtin();
    // three scenes for one cell of each group, driven by jittered group parameters
    for (k, group) in memory.groups().iter().enumerate() {
        for j in 0..3 {
            let mut truth = group.mean.to_params();
            truth.v_d += 0.25 * (j as f64 - 1.0);
            truth.h_d += 0.1 * ((j * 2 % 3) as f64 - 1.0);
            let id = format!("calib-{k}-{j}");
            let generated = excitation_scene(&id, (10 * k + j) as u64, &truth, &cfg);
            let s = Scenario::from_doc(ScenarioDoc {
                features: group.members[0],
                ..generated.doc().clone()
            })
            .expect("valid scenario");
            let reference = reference_from_trace(&simulate_fixed(&s, &truth, &cfg));
            std::fs::write(calib.join(format!("{id}.json")), serialize_scenario(&s))?;
            std::fs::write(refs.join(format!("{id}.json")), serde_json::to_string(&reference)?)?;
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}
