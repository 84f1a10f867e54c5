//! Run a scenario file (default: the quiescent hold) and print its summary.
//!
//! `cargo run --example run_scenario -- config/scenarios/exp2_both.toml`

use clampsim::scenario::{run_scenario, RunOptions, ScenarioConfig};

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/config/scenarios/quiescent.toml").into());
    let cfg = ScenarioConfig::load(&path)?;
    let out = run_scenario(&cfg, &RunOptions::default())?;
    println!("{}", out.summary);
    Ok(())
}
