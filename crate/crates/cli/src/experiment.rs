use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vpnpp::syndata::{short_hash, GenConfig};
use vpnpp::trainer::{Recipe, TrainConfig};
use vpnpp::vpn::ModelConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Experiment file:
///
/// ```toml
/// out = "runs"
/// report_formats = ["csv", "json"]
///
/// [gen]            # dataset generator, flat keys
/// class_count = 8
///
/// [model]          # shared by every recipe
/// [model.spaces]
/// att_dim = 64
///
/// [train.pose_teacher]
/// epochs = 40
/// [train.vpn_pp]
/// alpha = 50.0
/// ```
///
/// Recipes without a `[train.*]` table use the defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: Option<PathBuf>,
    pub report_formats: Vec<ReportFormat>,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: BTreeMap<String, toml::Table>,
    /// Set by `--seed`; overrides every recipe's seed and the dataset seed.
    #[serde(skip)]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.gen.seed = s;
            self.seed = Some(s);
        }
        self
    }

    pub fn json_reports(&self) -> bool {
        self.report_formats.contains(&ReportFormat::Json)
    }

    /// Checks every section and the teacher/student dependencies.
    pub fn validate(&self) -> CliResult {
        self.gen.validate()?;
        for name in self.train.keys() {
            let recipe: Recipe = name
                .parse()
                .map_err(|_| CliError::Config(format!("unknown recipe section [train.{name}]")))?;
            let cfg = self.train_config(recipe)?;
            if recipe.needs_pose_teacher() {
                let teacher = self.train_config(Recipe::PoseTeacher)?;
                if teacher.pose_corruption != cfg.pose_corruption {
                    return Err(CliError::Config(format!(
                        "[train.{name}] pose_corruption {} differs from its pose teacher's {}",
                        cfg.pose_corruption, teacher.pose_corruption
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fully resolved training configuration of `recipe`.
    pub fn train_config(&self, recipe: Recipe) -> CliResult<TrainConfig> {
        let mut table = self.train.get(recipe.as_str()).cloned().unwrap_or_default();
        for key in ["model", "recipe"] {
            if table.contains_key(key) {
                return Err(CliError::Config(format!(
                    "[train.{recipe}] must not set `{key}` (use [model] and the section name)"
                )));
            }
        }
        table.insert("recipe".into(), toml::Value::String(recipe.as_str().into()));
        let mut cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[train.{recipe}]: {}", e.message())))?;
        cfg.model = self.model.clone();
        cfg.model.adapt_to(&self.gen);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pose-teacher configuration a student run depends on.
    pub fn teacher_config_for(&self, student: &TrainConfig) -> CliResult<TrainConfig> {
        let mut t = self.train_config(Recipe::PoseTeacher)?;
        t.pose_corruption = student.pose_corruption;
        Ok(t)
    }
}

/// Artifact naming under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self, gen: &GenConfig) -> PathBuf {
        self.root.join(format!("data-{}", gen.hash()))
    }

    /// Identifies a training run by its config, its data and its teacher.
    pub fn run_id(cfg: &TrainConfig, gen: &GenConfig, teacher: Option<&TrainConfig>) -> String {
        let teacher = teacher.map(|t| Self::run_id(t, gen, None)).unwrap_or_default();
        short_hash(format!("{}|{}|{}", cfg.hash(), gen.hash(), teacher).as_bytes())
    }

    pub fn checkpoint(&self, recipe: Recipe, id: &str) -> PathBuf {
        self.root.join(format!("{recipe}-{id}.ckpt"))
    }

    pub fn artifact(&self, recipe: Recipe, id: &str, suffix: &str) -> PathBuf {
        self.root.join(format!("{recipe}-{id}-{suffix}"))
    }

    pub fn sub(&self, name: &str) -> Layout {
        Layout::new(self.root.join(name))
    }
}
