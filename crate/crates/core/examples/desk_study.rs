//! Runs the 58-site coverage study and prints the report as JSON.
//!
//! `cargo run --release -p mstcar --example desk_study -- [replicates] [synthetic]`

use mstcar::sampler::Variant;
use mstcar::simstudy::{run_study, PopulationMode, SimDesign, StudyConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let replicates = args
        .next()
        .map_or(25, |a| a.parse().expect("replicate count"));
    let mut design = SimDesign::equal_population("california58", 3, 10, replicates, 2024);
    if args.next().as_deref() == Some("synthetic") {
        design.population_mode = PopulationMode::synthetic();
    }
    let config = StudyConfig::short_truth_init(vec![Variant::Mstcar, Variant::Separable]);
    let report = run_study(&design, &config).expect("study failed");
    let summary = serde_json::json!({
        "coverage": report.coverage,
        "dic": report.dic,
        "imputation": report.imputation,
        "failures": report.failures,
        "stationary_replicates": report.stationary_replicates,
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
}
