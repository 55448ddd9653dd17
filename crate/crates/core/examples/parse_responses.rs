//! Prompt construction and response parsing with memory fallback.

use drive_mpc::dynamics::VehicleState;
use drive_mpc::memory::Memory;
use drive_mpc::planner::{build_prompt, parse_response, PromptKind};
use drive_mpc::scenario::{Features, SceneStatus};

fn main() {
    let memory = Memory::builtin();
    let fallback = memory.lookup(Features::new(false, true, false));
    let scene = SceneStatus {
        ego_history: (0..6)
            .map(|k| {
                let t = k as f64 * 0.1;
                VehicleState::new(5.0 * t, 5.0 + 0.1 * t, 0.1, t)
            })
            .collect(),
        leader: None,
        stop_line: None,
    };
    let prompt = build_prompt(PromptKind::Initial, Some(&fallback), None, &scene, None, None).unwrap();
    println!("--- prompt ---\n{}\n", prompt.text());

    let replies = [
        "Step 5: balanced. Final answer: [10, 1, 2.0, 3.5, 6.5, 2.8]",
        "I would use [9, 1, 1.5, 2.5, 6.0]",
        "Parameters: [9, 1, 1.5, 2.5, 6.0, 2.5, 0.1, 3]",
        "[9, 1, 1.5, 2.5, 40.0, 2.5]",
    ];
    for text in replies {
        let r = parse_response(text, 1.2);
        let used = r.parsed.unwrap_or(fallback);
        println!("{:?}: {:?} -> using {:?}", r.verdict, r.reason, used.to_array());
    }
}
