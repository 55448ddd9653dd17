//! Feedback-linearized plant against the exact discrete linear model.

use drive_mpc::dynamics::{linear_accel_step, plant_step, PlantParams, VehicleState};

fn main() {
    let plant = PlantParams::default();
    let mut nonlinear = VehicleState::new(0.0, 4.0, 0.0, 0.0);
    let mut linear = nonlinear;
    println!("{:>5} {:>9} {:>9} {:>9} {:>12}", "t", "x", "v", "a", "max |diff|");
    for k in 0..50 {
        let u = if k < 20 { 1.5 } else { -1.0 };
        nonlinear = plant_step(&nonlinear, u, &plant, 0.1);
        linear = linear_accel_step(&linear, u, plant.tau_a, 0.1);
        if k % 5 == 4 {
            let d = (nonlinear.x - linear.x)
                .abs()
                .max((nonlinear.v - linear.v).abs())
                .max((nonlinear.a - linear.a).abs());
            println!(
                "{:>5.1} {:>9.3} {:>9.3} {:>9.3} {:>12.2e}",
                (k + 1) as f64 * 0.1,
                nonlinear.x,
                nonlinear.v,
                nonlinear.a,
                d
            );
        }
    }
}
