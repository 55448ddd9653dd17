//! Record planner exchanges once, then replay them bit-for-bit without a service.

use std::sync::{Arc, Mutex};

use drive_mpc::cassette::Cassette;
use drive_mpc::memory::Memory;
use drive_mpc::planner::{CassetteLmClient, LmPlanner, RecordingLmClient, ScriptedLmClient};
use drive_mpc::simulator::{run_scenario, LatencyModel, SimConfig};
use drive_mpc::suite::braking_suite;

fn main() {
    let scenario = braking_suite().remove(3);
    let memory = Arc::new(Memory::builtin());
    let cfg = SimConfig {
        latency: LatencyModel::Recorded,
        ..SimConfig::default()
    };

    // stands in for a live model service
    let service = ScriptedLmClient::texts(
        &[
            "Step 5: keep a long headway. [9, 1, 1.7, 2.5, 6.0, 2.8]",
            "Slowing for the braking leader: [10, 1, 2.0, 3.5, 6.5, 2.8]",
            "[9, 1, 1.7, 2.5, 6.0]",
        ],
        2.1,
    );
    let tape = Arc::new(Mutex::new(Cassette::new()));
    let mut live = LmPlanner::new(Box::new(RecordingLmClient::new(service, tape.clone())), memory.clone());
    let recorded = run_scenario(&scenario, &mut live, &cfg).unwrap();
    let cassette = tape.lock().unwrap().clone();
    println!("recorded {} exchanges, ledger {:?}", cassette.len(), live.ledger().totals());

    let mut replay = LmPlanner::new(Box::new(CassetteLmClient::new(cassette)), memory);
    let replayed = run_scenario(&scenario, &mut replay, &cfg).unwrap();
    println!("replay identical: {}", recorded.to_ndjson() == replayed.to_ndjson());
    for e in &replayed.events {
        println!("t {:>5.1}  {:?}  {:?}", e.request_t, e.verdict, e.source);
    }
}
