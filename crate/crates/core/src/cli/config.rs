//! Run configuration: one flat key=value namespace over every tunable.
//!
//! Configs live in plain text files, one `key=value` per line with `#`
//! comments. Keys use dotted paths into the config tree (`model.width=32`,
//! `plan.samples=64`, `family=sparse`). Resolution order is defaults, then
//! the config file, then flag overrides — later wins. Unknown keys are
//! rejected so typos fail loudly instead of silently running defaults.
//!
//! [`RunConfig::to_kv`] renders the fully resolved tree back into the same
//! format; commands write it as `config.resolved` next to their artifacts,
//! and that file is itself a valid config reproducing the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::navsim::Family;
use crate::planner::PlanConfig;
use crate::worldmodel::{ModelConfig, TrainConfig};

use super::CliError;

/// Training knobs exposed to the config surface. Mirrors [`TrainConfig`]
/// minus the checkpoint directory, which commands always point at their own
/// output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub steps_per_epoch: u64,
    pub val_trajs: usize,
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            seed: t.seed,
            steps_per_epoch: t.steps_per_epoch,
            val_trajs: t.val_trajs,
            log_every: t.log_every,
        }
    }
}

impl TrainSection {
    /// Expands to a full training config writing checkpoints under `dir`.
    pub fn to_train_config(&self, dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            steps_per_epoch: self.steps_per_epoch,
            val_trajs: self.val_trajs,
            checkpoint_dir: dir,
            log_every: self.log_every,
        }
    }
}

/// Everything a command run depends on besides its flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// World family for data generation, planning, and suites.
    pub family: Family,
    /// Number of worlds in datasets and episode suites.
    pub worlds: usize,
    /// Seed of the first world; world `i` uses `world_seed + i`.
    pub world_seed: u64,
    /// Trajectories collected per world.
    pub traj_per_world: usize,
    /// Steps per collected trajectory.
    pub traj_len: usize,
    /// Master seed for everything not covered by a more specific seed.
    pub seed: u64,
    /// Held-out instances scored by generation evaluation.
    pub eval_instances: usize,
    /// Episodes per world in navigation suites.
    pub episodes_per_world: usize,
    /// Timing repetitions for the latency benchmark.
    pub bench_trials: usize,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub plan: PlanConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: Family::Empty,
            worlds: 5,
            world_seed: 0,
            traj_per_world: 10,
            traj_len: 200,
            seed: 0,
            eval_instances: 50,
            episodes_per_world: 10,
            bench_trials: 20,
            model: ModelConfig::default(),
            train: TrainSection::default(),
            plan: PlanConfig::default(),
        }
    }
}

/// Replaces the leaf at dotted path `key` with `raw` parsed against the
/// leaf's current JSON type. Unknown segments are errors.
fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, init) = parts.split_last().expect("split yields at least one part");
    let mut cur = root;
    for (i, part) in init.iter().enumerate() {
        cur = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("'{}' has no sub-keys", parts[..i].join("."))))?
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown config key '{key}'")))?;
    }
    let slot = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("'{}' has no sub-keys", init.join("."))))?
        .get_mut(*last)
        .ok_or_else(|| CliError::Config(format!("unknown config key '{key}'")))?;
    if slot.is_object() {
        return Err(CliError::Config(format!(
            "'{key}' is a section, not a value; set its sub-keys"
        )));
    }
    *slot = match slot {
        Value::String(_) => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).map_err(|_| {
            CliError::Config(format!("cannot parse '{raw}' as a value for '{key}'"))
        })?,
    };
    Ok(())
}

/// Appends `prefix.key=value` lines for every leaf under `value`.
fn flatten(prefix: &str, value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&path, v, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix}={s}")),
        other => out.push(format!("{prefix}={other}")),
    }
}

/// Splits one config line into a `(key, value)` pair.
fn parse_line(line: &str, lineno: usize) -> Result<Option<(String, String)>, CliError> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let (k, v) = body
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("line {lineno}: expected key=value, got '{body}'")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl RunConfig {
    /// Resolves a config from defaults, an optional file, and override
    /// pairs, in that order of increasing precedence.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config '{}': {e}", path.display()))
            })?;
            for (i, line) in text.lines().enumerate() {
                if let Some((k, v)) = parse_line(line, i + 1)? {
                    set_path(&mut tree, &k, &v)?;
                }
            }
        }
        for (k, v) in overrides {
            set_path(&mut tree, k, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.worlds == 0 || self.traj_per_world == 0 || self.traj_len == 0 {
            return Err(CliError::Config(
                "worlds, traj_per_world, and traj_len must be positive".into(),
            ));
        }
        if self.episodes_per_world == 0 || self.eval_instances == 0 {
            return Err(CliError::Config(
                "episodes_per_world and eval_instances must be positive".into(),
            ));
        }
        self.plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Renders the resolved config as sorted key=value lines — a valid
    /// config file that reproduces this exact configuration.
    pub fn to_kv(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.sort();
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_config(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_the_file() {
        let f = tmp_config("model.width = 16\nworlds = 3\n# comment\nplan.samples=64\n");
        let cfg = RunConfig::resolve(
            Some(f.path()),
            &[("worlds".into(), "2".into()), ("family".into(), "sparse".into())],
        )
        .unwrap();
        assert_eq!(cfg.model.width, 16);
        assert_eq!(cfg.plan.samples, 64);
        assert_eq!(cfg.worlds, 2);
        assert_eq!(cfg.family, Family::Sparse);
        assert_eq!(cfg.traj_len, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = tmp_config("model.depth=3\n");
        let err = RunConfig::resolve(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("unknown config key 'model.depth'"), "{err}");
        let err = RunConfig::resolve(None, &[("plan.sample".into(), "9".into())]).unwrap_err();
        assert!(err.to_string().contains("plan.sample"), "{err}");
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        let f = tmp_config("model.width\n");
        assert!(RunConfig::resolve(Some(f.path()), &[]).is_err());
        let err =
            RunConfig::resolve(None, &[("model.width".into(), "wide".into())]).unwrap_err();
        assert!(err.to_string().contains("cannot parse"), "{err}");
        let err = RunConfig::resolve(None, &[("model".into(), "3".into())]).unwrap_err();
        assert!(err.to_string().contains("section"), "{err}");
    }

    #[test]
    fn resolved_kv_round_trips_exactly() {
        let cfg = RunConfig::resolve(
            None,
            &[
                ("model.width".into(), "16".into()),
                ("plan.init".into(), "random_gaussian".into()),
                ("train.lr".into(), "0.001".into()),
                ("family".into(), "sparse".into()),
            ],
        )
        .unwrap();
        let f = tmp_config(&cfg.to_kv());
        let back = RunConfig::resolve(Some(f.path()), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_kv(), cfg.to_kv());
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(RunConfig::resolve(None, &[("worlds".into(), "0".into())]).is_err());
        assert!(RunConfig::resolve(None, &[("plan.samples".into(), "0".into())]).is_err());
    }
}
