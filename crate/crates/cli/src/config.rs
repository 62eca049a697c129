//! Experiment configuration: a TOML file plus `--set key=value` overrides.

use std::path::Path;

use hogn::dataio::{DatasetManifest, DtPolicy, TrajectoryManifest};
use hogn::integrators::Integrator;
use hogn::models::ModelKind;
use hogn::training::{log_grid, LrSchedule, TrainConfig};
use hogn::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_particle_counts: Vec<usize>,
    pub eval_particle_counts: Vec<usize>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub fixed_dt: f64,
    pub variable_dt_min: f64,
    pub variable_dt_max: f64,
    pub generation_jitter: f64,
    /// Also write variable-step pair datasets.
    pub variable: bool,
    pub trajectories: usize,
    pub trajectory_length: usize,
    pub trajectory_dts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_steps: f64,
    pub lr_floor: f64,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub count: usize,
    /// Step size of the validation trajectories used for ranking.
    pub rank_dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub integrators: Vec<Integrator>,
    pub dts: Vec<f64>,
}

/// Split names of the on-disk datasets.
pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const TEST: &str = "test";

impl Config {
    /// Reads `path`, applies `overrides` (`dotted.key=value`, value in TOML
    /// syntax or a bare string) and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Config = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (name, v) in [("train_pairs", d.train_pairs), ("val_pairs", d.val_pairs), ("test_pairs", d.test_pairs)] {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be positive")));
            }
        }
        if self.sweep.count == 0 || !(self.sweep.lr_min > 0.0 && self.sweep.lr_max < 1.0) {
            return Err(Error::Config("sweep needs a positive count and rates in (0, 1)".into()));
        }
        if self.evaluation.integrators.is_empty() {
            return Err(Error::Config("evaluation.integrators is empty".into()));
        }
        self.pair_manifest(TRAIN, false).validate()?;
        if d.variable {
            self.pair_manifest(TRAIN, true).validate()?;
        }
        self.trajectory_manifest(TEST).validate()?;
        self.train_config(ModelKind::HOGN, Integrator::Rk4, false).validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dt_policy(&self, variable: bool) -> DtPolicy {
        if variable {
            DtPolicy::Uniform {
                min: self.data.variable_dt_min,
                max: self.data.variable_dt_max,
                jitter: self.data.generation_jitter,
            }
        } else {
            DtPolicy::Fixed { dt: self.data.fixed_dt }
        }
    }

    /// Split name on disk, with a suffix for variable-step data.
    pub fn split_name(split: &str, variable: bool) -> String {
        if variable {
            format!("{split}-variable")
        } else {
            split.to_string()
        }
    }

    fn split_seed(&self, split: &str, variable: bool) -> u64 {
        let offset = match split {
            TRAIN => 1,
            VAL => 2,
            _ => 3,
        };
        self.seed.wrapping_mul(1000).wrapping_add(offset + if variable { 10 } else { 0 })
    }

    pub fn pair_manifest(&self, split: &str, variable: bool) -> DatasetManifest {
        let count = match split {
            TRAIN => self.data.train_pairs,
            VAL => self.data.val_pairs,
            _ => self.data.test_pairs,
        };
        DatasetManifest {
            split: Self::split_name(split, variable),
            particle_counts: self.data.train_particle_counts.clone(),
            count,
            dt_policy: self.dt_policy(variable),
            seed: self.split_seed(split, variable),
        }
    }

    pub fn trajectory_manifest(&self, split: &str) -> TrajectoryManifest {
        TrajectoryManifest {
            split: split.to_string(),
            particle_counts: self.data.eval_particle_counts.clone(),
            dts: self.data.trajectory_dts.clone(),
            count: self.data.trajectories,
            length: self.data.trajectory_length,
            seed: self.split_seed(split, false) + 100,
        }
    }

    pub fn train_config(&self, model: ModelKind, integrator: Integrator, variable: bool) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            model,
            integrator,
            dt_policy: self.dt_policy(variable),
            hidden: t.hidden.clone(),
            batch_size: t.batch_size,
            steps: t.steps,
            lr: t.lr,
            schedule: LrSchedule { rate: t.decay_rate, every: t.decay_steps, floor: t.lr_floor },
            eval_every: t.eval_every,
            seed: self.seed,
        }
    }

    pub fn lr_grid(&self) -> Vec<f64> {
        log_grid(self.sweep.lr_max, self.sweep.lr_min, self.sweep.count)
    }
}

fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table =
            node.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(Error::Config(format!("override {key:?}: unknown key")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node =
            table.get_mut(*part).ok_or_else(|| Error::Config(format!("override {key:?}: unknown table {part:?}")))?;
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = include_str!("../../../configs/desk.cfg");
    const PAPER: &str = include_str!("../../../configs/paper.cfg");

    #[test]
    fn checked_in_configs_parse() {
        let full = Config::parse(PAPER, &[]).unwrap();
        assert_eq!(full.training.batch_size, 100);
        assert_eq!(full.training.steps, 1_000_000);
        assert_eq!(full.lr_grid().len(), 13);
        assert_eq!(full.data.train_pairs, 10_000);
        let desk = Config::parse(DESK, &[]).unwrap();
        assert_eq!(desk.data.train_pairs, 1000);
        assert_eq!(desk.training.steps, 20_000);
    }

    #[test]
    fn overrides_replace_values_and_change_the_hash() {
        let base = Config::parse(DESK, &[]).unwrap();
        let c = Config::parse(DESK, &["training.steps=5".into(), "seed=9".into()]).unwrap();
        assert_eq!(c.training.steps, 5);
        assert_eq!(c.seed, 9);
        assert_ne!(c.hash(), base.hash());
        assert_eq!(base.hash(), Config::parse(DESK, &[]).unwrap().hash());
        assert!(Config::parse(DESK, &["training.nope=1".into()]).is_err());
        assert!(Config::parse(DESK, &["training.steps".into()]).is_err());
        assert!(Config::parse(DESK, &["training.lr=2.0".into()]).is_err());
        let ints = Config::parse(DESK, &["evaluation.integrators=[\"RK1\",\"S3\"]".into()]).unwrap();
        assert_eq!(ints.evaluation.integrators, vec![Integrator::Rk1, Integrator::S3]);
    }
}
