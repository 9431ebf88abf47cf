use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syndata::short_hash;
use crate::vpn::{ModelConfig, VpnLossWeights};

/// What a training run produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Pose-only classifier; cross-entropy only.
    PoseTeacher,
    /// Video-pose attention network trained on its own.
    VpnTeacher,
    /// RGB student without any distillation.
    RgbStudent,
    /// Student with contrastive feature distillation from a frozen pose teacher.
    VpnF,
    /// Student and attention teacher trained together with attention distillation.
    VpnA,
    /// Both distillation levels.
    VpnPp,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::PoseTeacher,
        Recipe::VpnTeacher,
        Recipe::RgbStudent,
        Recipe::VpnF,
        Recipe::VpnA,
        Recipe::VpnPp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::PoseTeacher => "pose_teacher",
            Recipe::VpnTeacher => "vpn_teacher",
            Recipe::RgbStudent => "rgb_student",
            Recipe::VpnF => "vpn_f",
            Recipe::VpnA => "vpn_a",
            Recipe::VpnPp => "vpn_pp",
        }
    }

    pub fn has_student(self) -> bool {
        matches!(self, Recipe::RgbStudent | Recipe::VpnF | Recipe::VpnA | Recipe::VpnPp)
    }

    /// Needs a trained pose-teacher checkpoint as input.
    pub fn needs_pose_teacher(self) -> bool {
        matches!(self, Recipe::VpnF | Recipe::VpnPp)
    }

    pub fn uses_contrastive(self) -> bool {
        self.needs_pose_teacher()
    }

    /// Trains an attention teacher alongside the student.
    pub fn uses_attention_teacher(self) -> bool {
        matches!(self, Recipe::VpnA | Recipe::VpnPp)
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Recipe::ALL.iter().map(|r| r.as_str()).collect();
                Error::InvalidConfig(format!("unknown recipe `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Multiply the rate by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
    Constant,
}

impl Schedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Step { every, factor } if every > 0 => base * factor.powi((epoch / every) as i32),
            _ => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub epochs: usize,
    /// Samples per step. Student recipes split it into positives and
    /// contrastive negatives; only the positives carry class supervision.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub alpha: f64,
    pub beta: f64,
    pub negatives_per_positive: usize,
    /// Overrides the pair-score constant; by default negatives per batch
    /// over the training-set size.
    pub pair_constant: Option<f64>,
    /// Rescales each network's gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Spatial embedding for the stand-alone video-pose teacher.
    pub with_se: bool,
    pub vpn_loss: VpnLossWeights,
    /// Pose corruption level applied to both splits, in `[0, 1]`.
    pub pose_corruption: f64,
    /// Maximum horizontal shift in pixels for training augmentation, and
    /// the crop offset used at evaluation.
    pub shift: usize,
    /// Evaluate on the test split every this many epochs (the final epoch
    /// is always evaluated); zero means final epoch only.
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::VpnPp,
            epochs: 60,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Step { every: 10, factor: 0.1 },
            alpha: 50.0,
            beta: 50.0,
            negatives_per_positive: 1,
            pair_constant: None,
            grad_clip: None,
            seed: 0,
            with_se: true,
            vpn_loss: VpnLossWeights::default(),
            pose_corruption: 0.0,
            shift: 2,
            eval_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_recipe(recipe: Recipe) -> Self {
        Self {
            recipe,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum = {} not in [0, 1)", self.momentum)));
        }
        if self.positives_per_step() == 0 {
            return Err(Error::InvalidConfig(format!(
                "batch size {} leaves no positives with {} negatives each",
                self.batch_size, self.negatives_per_positive
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if let Some(m) = self.pair_constant {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::InvalidConfig(format!("pair_constant = {m} must be > 0")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("grad_clip = {c} must be > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.pose_corruption) {
            return Err(Error::InvalidConfig(format!(
                "pose_corruption = {} not in [0, 1]",
                self.pose_corruption
            )));
        }
        if let Schedule::Step { factor, .. } = self.schedule {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::InvalidConfig(format!("schedule factor {factor} must be > 0")));
            }
        }
        self.model.validate()
    }

    /// Positive pairs (distinct training clips) per optimizer step.
    pub fn positives_per_step(&self) -> usize {
        if self.recipe.has_student() {
            self.batch_size / (1 + self.negatives_per_positive)
        } else {
            self.batch_size
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// 16 hex digits identifying the configuration.
    pub fn hash(&self) -> String {
        short_hash(self.to_toml().as_bytes())
    }
}
