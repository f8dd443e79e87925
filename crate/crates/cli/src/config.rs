//! Run configuration for the pipeline binary.
//!
//! One JSON document names the scenario file, the estimators to compare,
//! the seed list and the stage hyperparameters. Unknown keys anywhere in
//! the document are rejected, so a reproducibility audit never has to
//! wonder whether a typoed key silently fell back to a default.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fuselab::bench::{BenchConfig, Method};
use fuselab::sim::Scenario;

/// Environment variable overriding the artifact root.
pub const ENV_OUT_DIR: &str = "FUSELAB_OUT_DIR";
/// Environment variable overriding the seed-level worker count.
pub const ENV_THREADS: &str = "FUSELAB_THREADS";

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Top-level pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario JSON, resolved relative to this config file's directory.
    pub scenario: PathBuf,
    /// Estimators to compare, in report order. Defaults to all of them.
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Seeds to run; each seed is one fully isolated pipeline run.
    pub seeds: Vec<u64>,
    /// Artifact root, relative to the working directory. Overridden by
    /// `--out`, then by `FUSELAB_OUT_DIR`.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Stage hyperparameters. Missing fields keep desk-scale defaults.
    #[serde(default)]
    pub bench: BenchConfig,
}

/// Overrides carried in from the command line; `None` defers to the
/// environment and then to the config file.
#[derive(Debug, Default)]
pub struct CliOverrides {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// A run configuration with the scenario loaded, the output root and
/// worker count resolved, and the content hash computed.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub run: RunConfig,
    /// Scenario as shipped; each pipeline run replaces its seed.
    pub scenario: Scenario,
    pub out_dir: PathBuf,
    pub threads: usize,
    /// Hex SHA-256 over everything that determines artifact bytes.
    pub config_hash: String,
}

impl ResolvedConfig {
    pub fn load(path: &Path, over: &CliOverrides) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let run: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if run.seeds.is_empty() {
            bail!("config lists no seeds; at least one is required");
        }
        let mut sorted = run.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            bail!("config lists a duplicate seed; every seed gets its own artifact directory");
        }
        if run.methods.is_empty() {
            bail!("config lists no methods");
        }

        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let scenario_path = base.join(&run.scenario);
        let scenario_text = fs::read_to_string(&scenario_path)
            .with_context(|| format!("reading scenario {}", scenario_path.display()))?;
        let scenario: Scenario = serde_json::from_str(&scenario_text)
            .with_context(|| format!("parsing scenario {}", scenario_path.display()))?;
        scenario.validate()?;

        let out_dir = resolve_out(
            over.out.as_deref(),
            env::var_os(ENV_OUT_DIR).map(PathBuf::from),
            &run.out,
        );
        let threads = resolve_threads(over.threads, env::var(ENV_THREADS).ok().as_deref())?;
        let config_hash = hash_inputs(&scenario, &run);

        Ok(ResolvedConfig {
            run,
            scenario,
            out_dir,
            threads,
            config_hash,
        })
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }

    /// Seeds this invocation operates on: the full config list, or the
    /// `--seed` subset kept in config order.
    pub fn select_seeds(&self, requested: &[u64]) -> Result<Vec<u64>> {
        if requested.is_empty() {
            return Ok(self.run.seeds.clone());
        }
        for s in requested {
            if !self.run.seeds.contains(s) {
                bail!(
                    "seed {s} is not in the config's seed list {:?}",
                    self.run.seeds
                );
            }
        }
        Ok(self
            .run
            .seeds
            .iter()
            .copied()
            .filter(|s| requested.contains(s))
            .collect())
    }
}

/// Output root precedence: command-line flag, then environment, then the
/// config file.
fn resolve_out(flag: Option<&Path>, env_val: Option<PathBuf>, config: &Path) -> PathBuf {
    match (flag, env_val) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(e)) => e,
        (None, None) => config.to_path_buf(),
    }
}

/// Worker count precedence: flag, then environment, then one. Zero is
/// clamped up rather than rejected; it can only mean "serial".
fn resolve_threads(flag: Option<usize>, env_val: Option<&str>) -> Result<usize> {
    let n = match (flag, env_val) {
        (Some(t), _) => t,
        (None, Some(v)) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("{ENV_THREADS}={v} is not a thread count"))?,
        (None, None) => 1,
    };
    Ok(n.max(1))
}

/// Hashes the scenario, method list, seed list and stage hyperparameters.
/// The output location is deliberately excluded: moving artifacts does
/// not change their contents.
fn hash_inputs(scenario: &Scenario, run: &RunConfig) -> String {
    #[derive(Serialize)]
    struct HashInput<'a> {
        scenario: &'a Scenario,
        methods: &'a [Method],
        seeds: &'a [u64],
        bench: &'a BenchConfig,
    }
    let doc = serde_json::to_string(&HashInput {
        scenario,
        methods: &run.methods,
        seeds: &run.seeds,
        bench: &run.bench,
    })
    .expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(doc.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fuselab::sim::{SpeedProfile, TrajectorySpec};

    fn tiny_scenario() -> Scenario {
        Scenario {
            anchors: vec![
                [0.0, 0.0, 0.0],
                [10.0, 0.0, 1.0],
                [10.0, 10.0, 0.0],
                [0.0, 10.0, 2.0],
            ],
            trajectory: TrajectorySpec {
                waypoints: vec![[1.0, 1.0, 1.0], [9.0, 9.0, 1.0]],
                speed: SpeedProfile::Constant { speed: 1.0 },
            },
            imu_rate: 50.0,
            uwb_rate: 5.0,
            ref_rate: 1.0,
            duration: None,
            seed: 1,
            channel: Default::default(),
            imu: Default::default(),
            ref_sigma: 0.0,
            bounds: fuselab::sim::default_bounds(),
        }
    }

    fn write_pair(dir: &Path, config_body: &str) -> PathBuf {
        let scenario_path = dir.join("scenario.json");
        fs::write(
            &scenario_path,
            serde_json::to_string(&tiny_scenario()).unwrap(),
        )
        .unwrap();
        let config_path = dir.join("run.json");
        fs::write(&config_path, config_body).unwrap();
        config_path
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"scenario": "s.json", "seeds": [1], "typo_key": 3}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn unknown_method_is_rejected_at_parse_time() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"scenario": "s.json", "seeds": [1], "methods": ["kalmanator"]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown variant"), "{err}");
    }

    #[test]
    fn empty_and_duplicate_seed_lists_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_pair(dir.path(), r#"{"scenario": "scenario.json", "seeds": []}"#);
        let err = ResolvedConfig::load(&path, &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("no seeds"), "{err}");

        let path = write_pair(dir.path(), r#"{"scenario": "scenario.json", "seeds": [4, 4]}"#);
        let err = ResolvedConfig::load(&path, &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("duplicate seed"), "{err}");
    }

    #[test]
    fn load_resolves_scenario_relative_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_pair(
            dir.path(),
            r#"{"scenario": "scenario.json", "seeds": [1, 2]}"#,
        );
        let cfg = ResolvedConfig::load(&path, &CliOverrides::default()).unwrap();
        assert_eq!(cfg.run.seeds, vec![1, 2]);
        assert_eq!(cfg.run.methods, Method::ALL.to_vec());
        assert_eq!(cfg.scenario.anchors.len(), 4);
        assert_eq!(cfg.threads, 1);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        assert_eq!(cfg.config_hash.len(), 64);
    }

    #[test]
    fn out_dir_precedence_is_flag_env_config() {
        let config = Path::new("from-config");
        let env_val = Some(PathBuf::from("from-env"));
        assert_eq!(
            resolve_out(Some(Path::new("from-flag")), env_val.clone(), config),
            PathBuf::from("from-flag")
        );
        assert_eq!(resolve_out(None, env_val, config), PathBuf::from("from-env"));
        assert_eq!(resolve_out(None, None, config), PathBuf::from("from-config"));
    }

    #[test]
    fn thread_precedence_and_validation() {
        assert_eq!(resolve_threads(Some(3), Some("8")).unwrap(), 3);
        assert_eq!(resolve_threads(None, Some("8")).unwrap(), 8);
        assert_eq!(resolve_threads(None, None).unwrap(), 1);
        assert_eq!(resolve_threads(Some(0), None).unwrap(), 1);
        assert!(resolve_threads(None, Some("many")).is_err());
    }

    #[test]
    fn seed_selection_keeps_config_order_and_rejects_strangers() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_pair(
            dir.path(),
            r#"{"scenario": "scenario.json", "seeds": [5, 3, 9]}"#,
        );
        let cfg = ResolvedConfig::load(&path, &CliOverrides::default()).unwrap();
        assert_eq!(cfg.select_seeds(&[]).unwrap(), vec![5, 3, 9]);
        assert_eq!(cfg.select_seeds(&[9, 5]).unwrap(), vec![5, 9]);
        let err = cfg.select_seeds(&[7]).unwrap_err();
        assert!(err.to_string().contains("seed 7"), "{err}");
    }

    #[test]
    fn hash_tracks_content_not_location() {
        let base: RunConfig = serde_json::from_str(
            r#"{"scenario": "s.json", "seeds": [1, 2], "out": "a"}"#,
        )
        .unwrap();
        let scenario = tiny_scenario();
        let h0 = hash_inputs(&scenario, &base);
        assert_eq!(h0, hash_inputs(&scenario, &base), "hash is stable");

        let mut moved = base.clone();
        moved.out = PathBuf::from("elsewhere");
        assert_eq!(h0, hash_inputs(&scenario, &moved), "location is excluded");

        let mut reseeded = base.clone();
        reseeded.seeds = vec![1, 3];
        assert_ne!(h0, hash_inputs(&scenario, &reseeded));

        let mut rewindowed = base;
        rewindowed.bench.window = 32;
        assert_ne!(h0, hash_inputs(&scenario, &rewindowed));

        let mut other_world = scenario;
        other_world.anchors[0][2] = 5.0;
        let base: RunConfig =
            serde_json::from_str(r#"{"scenario": "s.json", "seeds": [1, 2], "out": "a"}"#).unwrap();
        assert_ne!(h0, hash_inputs(&other_world, &base));
    }
}
