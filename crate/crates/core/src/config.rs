//! Run configuration: one TOML file that spells out every knob of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::BudgetConfig;
use crate::env::{EpisodeConfig, OnProtocolError};
use crate::eval::EvalConfig;
use crate::pipeline::{DifficultyBand, RejectionConfig};
use crate::scenes::SceneSpec;
use crate::trainer::{GrpoConfig, SftConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid scene section")]
    Scene(#[from] crate::scenes::SceneError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub scenes: u64,
    pub sft: u64,
    pub rl: u64,
    pub eval: u64,
    /// Rejection sampling and difficulty filtering.
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub canvas: usize,
    pub grid: usize,
    pub glyph_size: usize,
    pub num_classes: usize,
    pub distractor_density: f64,
}

/// Which manifest streams feed each stage, and how many scenes each uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub sft_stream: u64,
    pub rl_stream: u64,
    pub eval_stream: u64,
    /// Candidate scenes offered to rejection sampling.
    pub sft_scenes: usize,
    pub eval_scenes: usize,
    /// Write every referenced view as a PPM file next to the records.
    pub write_assets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    pub max_turns: usize,
    pub context_limit: usize,
    pub constrained: bool,
    /// Absent: the budget follows the resolution of each image.
    #[serde(default)]
    pub fixed_budget_override: Option<usize>,
    pub on_protocol_error: OnProtocolError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionSection {
    pub rollouts_per_scene: usize,
    pub iou_threshold: f64,
    pub max_focus_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultySection {
    pub rollouts: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub constrained: bool,
    #[serde(default)]
    pub budget_override: Option<usize>,
    pub max_turns: usize,
    pub context_limit: usize,
    pub rollouts_per_query: usize,
    pub budgets_for_sweep: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seeds: Seeds,
    pub scenes: SceneSection,
    pub data: DataSection,
    pub budget: BudgetConfig,
    pub train_env: EpisodeSection,
    pub sft: SftSection,
    pub rejection: RejectionSection,
    pub difficulty: DifficultySection,
    pub grpo: GrpoConfig,
    pub eval: EvalSection,
}

/// Learning rates that suit the linear policy's feature scale.
pub const DEFAULT_SFT_LEARNING_RATE: f64 = 1.0;
pub const DEFAULT_RL_LEARNING_RATE: f64 = 20.0;

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SceneSpec::default();
        let env = EpisodeConfig::training();
        let eval = EvalConfig::default();
        let sft = SftConfig::default();
        let rej = RejectionConfig::default();
        let band = DifficultyBand::default();
        Self {
            out: PathBuf::from("runs/default"),
            seeds: Seeds {
                scenes: spec.seed,
                sft: sft.seed,
                rl: 11,
                eval: eval.seed,
                data: rej.seed,
            },
            scenes: SceneSection {
                canvas: spec.canvas,
                grid: spec.grid,
                glyph_size: spec.glyph_size,
                num_classes: spec.num_classes,
                distractor_density: spec.distractor_density,
            },
            data: DataSection {
                sft_stream: 1,
                rl_stream: 2,
                eval_stream: 3,
                sft_scenes: 256,
                eval_scenes: 100,
                write_assets: false,
            },
            budget: env.budget,
            train_env: EpisodeSection {
                max_turns: env.max_turns,
                context_limit: env.context_limit,
                constrained: env.constrained,
                fixed_budget_override: env.fixed_budget_override,
                on_protocol_error: env.on_protocol_error,
            },
            sft: SftSection {
                epochs: 10,
                batch_size: 8,
                learning_rate: DEFAULT_SFT_LEARNING_RATE,
            },
            rejection: RejectionSection {
                rollouts_per_scene: rej.rollouts_per_scene,
                iou_threshold: rej.iou_threshold,
                max_focus_turns: rej.max_focus_turns,
            },
            difficulty: DifficultySection {
                rollouts: 8,
                lo: band.lo,
                hi: band.hi,
            },
            grpo: GrpoConfig {
                learning_rate: DEFAULT_RL_LEARNING_RATE,
                batch_queries: 16,
                minibatch: 64,
                max_steps: 30,
                max_degenerate_steps: 30,
                ..GrpoConfig::default()
            },
            eval: EvalSection {
                constrained: eval.constrained,
                budget_override: eval.budget_override,
                max_turns: eval.max_turns,
                context_limit: eval.context_limit,
                rollouts_per_query: eval.rollouts_per_query,
                budgets_for_sweep: eval.budgets_for_sweep,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable in TOML")
    }

    /// Every seed, scene seed included, set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds {
            scenes: seed,
            sft: seed,
            rl: seed,
            eval: seed,
            data: seed,
        };
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.scene_spec().validate()?;
        self.episode_config().validate().map_err(|e| invalid(&e))?;
        self.eval_config().validate().map_err(|e| invalid(&e))?;
        self.sft_config().validate().map_err(|e| invalid(&e))?;
        self.grpo.validate().map_err(|e| invalid(&e))?;
        if self.rejection.rollouts_per_scene == 0 || self.difficulty.rollouts == 0 {
            return Err(ConfigError::Invalid("rollout counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rejection.iou_threshold) {
            return Err(ConfigError::Invalid("iou_threshold must lie in [0, 1]".into()));
        }
        if !(self.difficulty.lo <= self.difficulty.hi) {
            return Err(ConfigError::Invalid("difficulty band is empty".into()));
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let s = &self.scenes;
        SceneSpec {
            canvas: s.canvas,
            grid: s.grid,
            glyph_size: s.glyph_size,
            num_classes: s.num_classes,
            distractor_density: s.distractor_density,
            seed: self.seeds.scenes,
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        let e = &self.train_env;
        EpisodeConfig {
            max_turns: e.max_turns,
            context_limit: e.context_limit,
            budget: self.budget,
            constrained: e.constrained,
            fixed_budget_override: e.fixed_budget_override,
            on_protocol_error: e.on_protocol_error,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            constrained: e.constrained,
            budget_override: e.budget_override,
            max_turns: e.max_turns,
            context_limit: e.context_limit,
            rollouts_per_query: e.rollouts_per_query,
            budgets_for_sweep: e.budgets_for_sweep.clone(),
            budget: self.budget,
            seed: self.seeds.eval,
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft.epochs,
            batch_size: self.sft.batch_size,
            learning_rate: self.sft.learning_rate,
            seed: self.seeds.sft,
        }
    }

    pub fn rejection_config(&self) -> RejectionConfig {
        RejectionConfig {
            rollouts_per_scene: self.rejection.rollouts_per_scene,
            iou_threshold: self.rejection.iou_threshold,
            max_focus_turns: self.rejection.max_focus_turns,
            seed: self.seeds.data,
        }
    }

    pub fn difficulty_band(&self) -> DifficultyBand {
        DifficultyBand {
            lo: self.difficulty.lo,
            hi: self.difficulty.hi,
        }
    }
}
