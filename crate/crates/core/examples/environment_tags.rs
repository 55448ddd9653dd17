//! Environment description from encoder scores, and the memory cell it selects.

use drive_mpc::environment::{assemble_env, render_env_text, Category, LabelScore};
use drive_mpc::memory::{features_from_env, Memory};

fn main() {
    let scores = vec![
        LabelScore::new(Category::Weather, "rainy", 0.71),
        LabelScore::new(Category::Weather, "clear", 0.29),
        LabelScore::new(Category::Lighting, "night", 0.64),
        LabelScore::new(Category::Lighting, "day", 0.36),
        LabelScore::new(Category::RoadType, "intersection", 0.58),
        LabelScore::new(Category::RoadType, "straight road", 0.42),
        LabelScore::new(Category::RoadCondition, "wet", 0.34),
        LabelScore::new(Category::Obstacle, "pedestrian", 0.26),
        LabelScore::new(Category::Obstacle, "cyclist", 0.12),
    ];
    let env = assemble_env(&scores).expect("every category scored");
    println!("{}", render_env_text(&env));
    let features = features_from_env(&env);
    println!("cell {} -> {:?}", features.tag(), Memory::builtin().lookup(features));
}
