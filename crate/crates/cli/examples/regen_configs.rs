//! Regenerates the shipped files under `configs/` from the code that
//! defines them, so the JSON on disk can never drift from the structs it
//! must parse into. Run after changing scenario or benchmark defaults:
//!
//! ```text
//! cargo run -p fuselab-cli --example regen_configs
//! ```

use std::fs;
use std::path::Path;

use fuselab::bench::{BenchConfig, Method};
use fuselab::sim::reference_scenario;
use fuselab_cli::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    fs::create_dir_all(&dir)?;

    // The seed stored in the scenario file is a placeholder; the pipeline
    // overwrites it with each run seed from the config.
    let scenario = reference_scenario(1);
    let scenario_path = dir.join("reference-scenario.json");
    fs::write(&scenario_path, serde_json::to_string_pretty(&scenario)? + "\n")?;
    println!("wrote {}", scenario_path.display());

    let run = RunConfig {
        scenario: "reference-scenario.json".into(),
        methods: vec![
            Method::UwbOnly,
            Method::Akf,
            Method::Bilstm,
            Method::FusionNet,
            Method::FusionNetDgan,
        ],
        seeds: vec![1, 2, 3, 4, 5],
        out: "out".into(),
        bench: BenchConfig::default(),
    };
    let run_path = dir.join("reference.json");
    fs::write(&run_path, serde_json::to_string_pretty(&run)? + "\n")?;
    println!("wrote {}", run_path.display());
    Ok(())
}
