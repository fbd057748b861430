//! Run configuration read from a TOML file and echoed next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use rfmeta::evaluation::ThresholdGrid;
use rfmeta::metalearn::MetaConfig;
use rfmeta::neuralnet::NetSpec;
use rfmeta::scenario::{DomainRecipe, ScenarioConfig};
use rfmeta::tasking::{KernelSpec, TaskConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Scenario presets accepted by `gen.preset`.
pub const SCENARIO_PRESETS: [&str; 2] = ["vanilla-4train-1test", "model-families"];

/// File name of the config snapshot written into every output directory.
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Dataset directory written by `gen`; `--data` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub gen: GenConfig,
    pub network: NetworkConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: None,
            gen: GenConfig::default(),
            network: NetworkConfig::default(),
            meta: MetaConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Dataset generation. Every field except `preset` overrides the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_tasks_per_domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_tasks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_rp: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_drift_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<Vec<DomainRecipe>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<DomainRecipe>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            preset: SCENARIO_PRESETS[0].to_string(),
            train_tasks_per_domain: None,
            test_tasks: None,
            samples_per_rp: None,
            task_drift_db: None,
            task: None,
            train: None,
            test: None,
        }
    }
}

impl GenConfig {
    pub fn scenario(&self, seed: u64) -> Result<ScenarioConfig> {
        let mut sc = match self.preset.as_str() {
            "vanilla-4train-1test" => ScenarioConfig::vanilla_4train_1test(seed)?,
            "model-families" => ScenarioConfig::model_families(seed)?,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown scenario preset {other:?}; expected one of {}",
                    SCENARIO_PRESETS.join(", ")
                )))
            }
        };
        if let Some(n) = self.train_tasks_per_domain {
            sc.train_tasks_per_domain = n;
        }
        if let Some(n) = self.test_tasks {
            sc.test_tasks = n;
        }
        if let Some(n) = self.samples_per_rp {
            sc.samples_per_rp = n;
        }
        if let Some(d) = self.task_drift_db {
            sc.task_drift_db = d;
        }
        if let Some(t) = &self.task {
            sc.task = t.clone();
        }
        if let Some(train) = &self.train {
            sc.train = train.clone();
        }
        if let Some(test) = &self.test {
            sc.test = test.clone();
        }
        sc.validate()?;
        Ok(sc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

impl NetworkConfig {
    pub fn spec(&self, input_dim: usize) -> Result<NetSpec> {
        Ok(NetSpec::regression(input_dim, &self.hidden)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: ThresholdGrid,
    /// Neighbors for the KNN and WKNN baselines.
    pub k: usize,
    /// Kernel for ranking environments when testing per-domain checkpoints.
    pub kernel: KernelSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: ThresholdGrid::default(),
            k: 5,
            kernel: KernelSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|source| CliError::ParseConfig {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Usage(format!("seed {} does not fit in a TOML integer", self.seed)));
        }
        if self.eval.k == 0 {
            return Err(CliError::Usage("eval.k must be positive".into()));
        }
        self.eval.grid.thresholds()?;
        self.meta.validate()?;
        Ok(())
    }

    /// Writes the snapshot into `dir` and checks that it parses back.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml_string()?).map_err(|e| CliError::io(&path, e))?;
        let back = Self::load(&path)?;
        if &back != self {
            return Err(CliError::validation(&path, "snapshot does not round-trip"));
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_snapshot_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(text.contains("alpha = 0.01"));
        assert!(text.contains("finetune_steps = 10"));
    }

    #[test]
    fn overrides_apply_to_the_preset() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [gen]
            preset = "model-families"
            train_tasks_per_domain = 7
            "#,
        )
        .unwrap();
        let sc = cfg.gen.scenario(3).unwrap();
        assert_eq!(sc.train.len(), 5);
        assert_eq!(sc.train_tasks_per_domain, 7);
        assert_eq!(sc.seed, 3);
    }

    #[test]
    fn unknown_fields_and_presets_are_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1").is_err());
        let cfg = RunConfig::from_toml_str("[gen]\npreset = \"nope\"").unwrap();
        assert!(cfg.gen.scenario(0).is_err());
    }
}
