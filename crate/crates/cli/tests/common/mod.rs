//! Shared fixtures for the CLI integration tests: a small scenario that
//! still produces enough ranging windows for a train/val/test split, and
//! a run configuration pointed at it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fuselab::sim::Scenario;

/// Five anchors around a 30 x 20 m hall, two legs of travel, ~19 s at
/// 10 Hz ranging: 11 windows of 16 slots, so the 70/15/15 split holds.
/// Parsed from JSON so the channel and IMU models take their defaults.
pub fn tiny_scenario() -> Scenario {
    serde_json::from_value(serde_json::json!({
        "anchors": [
            [0.0, 0.0, 0.0],
            [30.0, 0.0, 2.0],
            [30.0, 20.0, 0.0],
            [0.0, 20.0, 2.5],
            [15.0, 10.0, 4.0],
        ],
        "trajectory": {
            "waypoints": [[2.0, 2.0, 0.0], [26.0, 4.0, 1.0], [14.0, 16.0, 0.5]],
            "speed": { "profile": "constant", "speed": 2.2 },
        },
        "imu_rate": 100.0,
        "uwb_rate": 10.0,
        "ref_rate": 5.0,
        "seed": 0,
    }))
    .expect("fixture scenario must parse")
}

/// Writes the tiny scenario plus a run config into `dir` and returns the
/// config path. `out` lands inside `dir` so nothing leaks between tests.
pub fn write_run_config(dir: &Path, methods: &[&str], seeds: &[u64]) -> PathBuf {
    let scenario_path = dir.join("scenario.json");
    fs::write(
        &scenario_path,
        serde_json::to_string_pretty(&tiny_scenario()).unwrap(),
    )
    .unwrap();
    let config = serde_json::json!({
        "scenario": "scenario.json",
        "methods": methods,
        "seeds": seeds,
        "out": dir.join("out"),
        "bench": {
            "window": 16,
            "fusion": { "hidden": 6, "max_epochs": 3, "patience": 3, "plateau": 2, "batch": 4 },
            "bilstm": { "hidden": 6, "max_epochs": 3, "patience": 3 },
            "diffusion": { "hidden": 8, "epochs": 3, "batch": 16 }
        }
    });
    let config_path = dir.join("run.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    config_path
}

/// Runs the compiled binary with FUSELAB_* scrubbed from the environment.
pub fn fuselab_bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuselab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FUSELAB_OUT_DIR")
        .env_remove("FUSELAB_THREADS")
        .output()
        .expect("binary should spawn")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
