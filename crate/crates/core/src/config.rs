//! TOML configuration, one section per module. Every field has a default so
//! a partial file (or none at all) is valid.

use std::path::Path;

use latent_autograd::LrSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Architecture hyperparameters shared by every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum number of text tokens in a sequence (image patches excluded).
    pub max_len: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub num_colors: usize,
    pub ffn_mult: usize,
    pub codebook_size: usize,
    pub inverse_layers: usize,
    pub policy_layers: usize,
    pub merge_hidden_mult: usize,
    pub projector_hidden_mult: usize,
    pub projector_hidden_layers: usize,
    pub log_std_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            layers: 4,
            heads: 4,
            max_len: 64,
            grid_height: 6,
            grid_width: 6,
            num_colors: 8,
            ffn_mult: 4,
            codebook_size: 128,
            inverse_layers: 4,
            policy_layers: 8,
            merge_hidden_mult: 2,
            projector_hidden_mult: 4,
            projector_hidden_layers: 2,
            log_std_clamp: 6.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.vocab_size >= 4, || format!("vocab_size {} < 4", self.vocab_size))?;
        ensure(self.d_model >= 1 && self.heads >= 1, || "d_model and heads must be positive".into())?;
        ensure(self.d_model % self.heads == 0, || {
            format!("d_model {} not divisible by heads {}", self.d_model, self.heads)
        })?;
        ensure(self.codebook_size >= 2, || format!("codebook_size {} < 2", self.codebook_size))?;
        ensure(self.grid_height >= 1 && self.grid_width >= 1, || "grid dims must be positive".into())?;
        ensure(self.num_colors >= 1, || "num_colors must be positive".into())?;
        ensure(self.max_len >= 2, || "max_len must be at least 2".into())?;
        ensure(self.log_std_clamp > 0.0, || "log_std_clamp must be positive".into())?;
        Ok(())
    }

    /// Tiny instance used by the finite-difference suites.
    pub fn gradcheck() -> Self {
        Self {
            vocab_size: 16,
            d_model: 8,
            layers: 1,
            heads: 2,
            max_len: 8,
            grid_height: 2,
            grid_width: 2,
            num_colors: 3,
            ffn_mult: 2,
            codebook_size: 4,
            inverse_layers: 4,
            policy_layers: 8,
            merge_hidden_mult: 2,
            projector_hidden_mult: 2,
            projector_hidden_layers: 2,
            log_std_clamp: 6.0,
        }
    }
}

/// Optimizer schedule for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub lr: f64,
    /// Cosine decay to `min_lr`; otherwise the learning rate is constant.
    pub cosine: bool,
    pub min_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps (applied after `epochs`).
    pub max_steps: Option<usize>,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { lr: 1e-4, cosine: true, min_lr: 1e-5, batch_size: 16, epochs: 1, max_steps: None }
    }
}

impl StageSchedule {
    pub fn steps_for(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.batch_size.max(1));
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }

    pub fn lr_schedule(&self, total_steps: usize) -> LrSchedule {
        if self.cosine {
            LrSchedule::Cosine { lr: self.lr, min_lr: self.min_lr, total_steps }
        } else {
            LrSchedule::Constant { lr: self.lr }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSpaceConfig {
    pub gumbel_temperature: f64,
}

impl Default for LatentSpaceConfig {
    fn default() -> Self {
        Self { gumbel_temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModelConfig {
    pub stage1: StageSchedule,
    pub stage3: StageSchedule,
    pub inverse_weight: f64,
    pub projector_weight: f64,
    /// Sample from the projector Gaussian instead of using its mean when
    /// routing text-only embeddings.
    pub sample_text_route: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            stage1: StageSchedule { epochs: 3, ..StageSchedule::default() },
            stage3: StageSchedule::default(),
            inverse_weight: 1.0,
            projector_weight: 1.0,
            sample_text_route: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub step1: StageSchedule,
    /// Feed a reparameterized sample (not the mean) into the reverse projector.
    pub sample_cycle: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            step1: StageSchedule { lr: 1e-3, cosine: true, min_lr: 0.0, batch_size: 16, epochs: 1, max_steps: None },
            sample_cycle: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyBcConfig {
    pub bc: StageSchedule,
}

impl Default for PolicyBcConfig {
    fn default() -> Self {
        Self { bc: StageSchedule { lr: 1e-4, cosine: true, min_lr: 0.0, batch_size: 16, epochs: 1, max_steps: None } }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Grpo,
    Drgrpo,
    Dapo,
    Bnpo,
}

impl std::str::FromStr for Algorithm {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(Algorithm::Grpo),
            "drgrpo" | "dr-grpo" | "dr.grpo" => Ok(Algorithm::Drgrpo),
            "dapo" => Ok(Algorithm::Dapo),
            "bnpo" => Ok(Algorithm::Bnpo),
            other => Err(crate::Error::validation(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Latent,
    Token,
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "latent" => Ok(Mode::Latent),
            "token" => Ok(Mode::Token),
            other => Err(crate::Error::validation(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub group_size: usize,
    pub batch_tasks: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub kl_coef: f64,
    pub rollout_temperature: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    /// Upper clip used instead of `clip_high` when the algorithm is dapo.
    pub dapo_clip_high: f64,
    pub sft: StageSchedule,
    /// Fraction of the RL training tasks used for SFT; the rest drive RL.
    pub sft_fraction: f64,
    /// Causal-LM pretraining of the token baseline on the same corpora.
    pub token_pretrain: StageSchedule,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            mode: Mode::Latent,
            group_size: 8,
            batch_tasks: 32,
            steps: 100,
            learning_rate: 1e-6,
            kl_coef: 0.01,
            rollout_temperature: 1.0,
            clip_low: 0.2,
            clip_high: 0.2,
            dapo_clip_high: 0.28,
            sft: StageSchedule { lr: 5e-6, cosine: false, min_lr: 0.0, batch_size: 16, epochs: 2, max_steps: None },
            sft_fraction: 0.5,
            token_pretrain: StageSchedule { epochs: 3, ..StageSchedule::default() },
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.group_size >= 2, || format!("group_size {} < 2", self.group_size))?;
        ensure(self.batch_tasks >= 1, || "batch_tasks must be positive".into())?;
        ensure(self.kl_coef >= 0.0, || "kl_coef must be non-negative".into())?;
        ensure(self.rollout_temperature >= 0.0, || "rollout_temperature must be non-negative".into())?;
        ensure(
            (0.0..1.0).contains(&self.clip_low) && self.clip_high > 0.0 && self.dapo_clip_high > 0.0,
            || "clip bounds must satisfy 0 <= clip_low < 1 and clip_high > 0".into(),
        )?;
        ensure((0.0..=1.0).contains(&self.sft_fraction), || "sft_fraction must lie in [0,1]".into())?;
        Ok(())
    }

    pub fn clip_bounds(&self) -> (f64, f64) {
        match self.algorithm {
            Algorithm::Dapo => (self.clip_low, self.dapo_clip_high),
            _ => (self.clip_low, self.clip_high),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_paired: usize,
    pub n_text: usize,
    pub n_tasks: usize,
    pub text_only_style_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_paired: 20_000, n_text: 20_000, n_tasks: 1_000, text_only_style_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub inference_temperature: f64,
    pub diversity_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { inference_temperature: 0.1, diversity_prompts: 200 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub backbone: ModelConfig,
    pub latent_space: LatentSpaceConfig,
    pub world_model: WorldModelConfig,
    pub projector: ProjectorConfig,
    pub policy_bc: PolicyBcConfig,
    pub rl_engine: RlConfig,
    pub corpus_tasks: CorpusConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.rl_engine.validate()?;
        ensure(self.latent_space.gumbel_temperature > 0.0, || "gumbel_temperature must be positive".into())?;
        Ok(())
    }
}
