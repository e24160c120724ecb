//! Run configuration: a flat key=value text format with typed validation.
//!
//! Every field is checked against module preconditions before any work
//! starts, unknown keys are rejected, and validation reports every
//! violation at once. The effective configuration (after `--set` overrides)
//! is written back as a snapshot so a run directory is self-describing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::envs::RewardMode;
use crate::learner::TargetMode;
use crate::nets::Backbone;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not readable: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
}

/// Complete, typed description of one training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: String,
    pub reward: RewardMode,
    pub seed: u64,
    pub total_steps: u64,
    pub segment_length: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub windows_per_step: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub target_mode: String,
    pub tau: f64,
    pub freeze_k: usize,
    pub utd: f64,
    pub critic_updates: usize,
    pub policy_updates: usize,
    pub learning_starts: u64,
    pub temperature_warmup: u64,
    /// `"auto"` resolves to minus the action dimension.
    pub target_entropy: String,
    pub alpha_init: f64,
    pub backbone: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dims_per_head: usize,
    pub ffn_hidden: usize,
    pub pre_norm: bool,
    pub policy_hidden: usize,
    pub log_std_init: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub weight_decay: f64,
    pub twin_critic: bool,
    pub averaged_target: bool,
    pub n_action_samples: usize,
    pub capacity_segments: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "pointmass-2d".to_string(),
            reward: RewardMode::Dense,
            seed: 0,
            total_steps: 30_000,
            segment_length: 25,
            l_min: 1,
            l_max: 8,
            windows_per_step: 4,
            batch_size: 32,
            gamma: 0.99,
            target_mode: "soft".to_string(),
            tau: 5e-3,
            freeze_k: 20,
            utd: 1.0,
            critic_updates: 5,
            policy_updates: 1,
            learning_starts: 1000,
            temperature_warmup: 1000,
            target_entropy: "auto".to_string(),
            alpha_init: 0.2,
            backbone: "transformer".to_string(),
            num_layers: 2,
            num_heads: 4,
            dims_per_head: 8,
            ffn_hidden: 64,
            pre_norm: false,
            policy_hidden: 128,
            log_std_init: -1.0,
            lr_policy: 1e-3,
            lr_critic: 1e-3,
            lr_alpha: 2.5e-4,
            weight_decay: 0.0,
            twin_critic: false,
            averaged_target: false,
            n_action_samples: 1,
            capacity_segments: 2000,
            eval_interval: 2000,
            eval_episodes: 8,
            checkpoint_interval: 0,
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro! {
            env: string,
            reward: reward_mode,
            seed: u64,
            total_steps: u64,
            segment_length: usize,
            l_min: usize,
            l_max: usize,
            windows_per_step: usize,
            batch_size: usize,
            gamma: f64,
            target_mode: string,
            tau: f64,
            freeze_k: usize,
            utd: f64,
            critic_updates: usize,
            policy_updates: usize,
            learning_starts: u64,
            temperature_warmup: u64,
            target_entropy: string,
            alpha_init: f64,
            backbone: string,
            num_layers: usize,
            num_heads: usize,
            dims_per_head: usize,
            ffn_hidden: usize,
            pre_norm: bool,
            policy_hidden: usize,
            log_std_init: f64,
            lr_policy: f64,
            lr_critic: f64,
            lr_alpha: f64,
            weight_decay: f64,
            twin_critic: bool,
            averaged_target: bool,
            n_action_samples: usize,
            capacity_segments: usize,
            eval_interval: u64,
            eval_episodes: usize,
            checkpoint_interval: u64,
        }
    };
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |ty: &'static str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            ty,
        };
        macro_rules! apply {
            ($($field:ident : $kind:ident,)*) => {
                match key {
                    $(stringify!($field) => apply!(@one $field, $kind),)*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
            };
            (@one reward, reward_mode) => {
                self.reward = match value {
                    "dense" => RewardMode::Dense,
                    "sparse" => RewardMode::Sparse,
                    _ => return Err(bad("one of dense|sparse")),
                }
            };
            (@one $field:ident, string) => {
                self.$field = value.to_string()
            };
            (@one $field:ident, bool) => {
                self.$field = value.parse::<bool>().map_err(|_| bad("bool"))?
            };
            (@one $field:ident, u64) => {
                self.$field = value.parse::<u64>().map_err(|_| bad("unsigned integer"))?
            };
            (@one $field:ident, usize) => {
                self.$field = value.parse::<usize>().map_err(|_| bad("unsigned integer"))?
            };
            (@one $field:ident, f64) => {
                self.$field = value.parse::<f64>().map_err(|_| bad("number"))?
            };
        }
        config_fields!(apply);
        Ok(())
    }

    /// Serializes every field as `key = value`, one per line, in the fixed
    /// field order.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($field:ident : $kind:ident,)*) => {
                $(emit!(@one $field, $kind);)*
            };
            (@one reward, reward_mode) => {
                let _ = writeln!(out, "reward = {}", match self.reward {
                    RewardMode::Dense => "dense",
                    RewardMode::Sparse => "sparse",
                });
            };
            (@one $field:ident, $kind:ident) => {
                let _ = writeln!(out, "{} = {}", stringify!($field), self.$field);
            };
        }
        config_fields!(emit);
        out
    }

    /// Parses a config file, then applies `key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, overrides)
    }

    /// Parses config text (`key = value` lines, `#` comments); keys may not
    /// repeat within the file. Overrides may touch any key, repeatedly.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), line).is_some() {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value)?;
        }
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(ConfigError::BadOverride(item.clone()));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parsed target mode (valid only after [`Self::validate`]).
    pub fn parsed_target_mode(&self) -> TargetMode {
        match self.target_mode.as_str() {
            "soft" => TargetMode::SoftPolyak { tau: self.tau },
            "hard" => TargetMode::HardFreeze { k: self.freeze_k },
            other => unreachable!("validated target mode: {other}"),
        }
    }

    pub fn parsed_backbone(&self) -> Backbone {
        self.backbone.parse().expect("validated backbone")
    }

    /// Resolves the target entropy against an action dimension.
    pub fn resolved_target_entropy(&self, act_dim: usize) -> f64 {
        if self.target_entropy == "auto" {
            -(act_dim as f64)
        } else {
            self.target_entropy.parse().expect("validated entropy")
        }
    }

    /// Checks every field against the preconditions of the modules that
    /// consume it; reports all violations.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        if crate::envs::make_env(&self.env, self.reward).is_err() {
            errors.push(format!(
                "env: unknown id `{}` (known: pointmass-2d, chain-reach)",
                self.env
            ));
        }
        if self.total_steps == 0 {
            errors.push("total_steps: must be >= 1".into());
        }
        if self.segment_length == 0 {
            errors.push("segment_length: must be >= 1".into());
        }
        if self.l_min == 0 || self.l_min > self.l_max || self.l_max > self.segment_length {
            errors.push(format!(
                "window bounds: need 1 <= l_min <= l_max <= segment_length, got [{}, {}] with L = {}",
                self.l_min, self.l_max, self.segment_length
            ));
        }
        if self.windows_per_step == 0 {
            errors.push("windows_per_step: must be >= 1".into());
        }
        if self.batch_size == 0 {
            errors.push("batch_size: must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            errors.push(format!("gamma: must lie in (0, 1], got {}", self.gamma));
        }
        match self.target_mode.as_str() {
            "soft" => {
                if !(self.tau > 0.0 && self.tau <= 1.0) {
                    errors.push(format!("tau: must lie in (0, 1], got {}", self.tau));
                }
            }
            "hard" => {
                if self.freeze_k == 0 {
                    errors.push("freeze_k: must be >= 1".into());
                }
            }
            other => errors.push(format!("target_mode: `{other}` is not one of soft|hard")),
        }
        if self.utd < 0.0 || !self.utd.is_finite() {
            errors.push(format!("utd: must be a finite ratio >= 0, got {}", self.utd));
        }
        if self.critic_updates == 0 {
            errors.push("critic_updates: must be >= 1".into());
        }
        if self.policy_updates == 0 {
            errors.push("policy_updates: must be >= 1".into());
        }
        if self.target_entropy != "auto" && self.target_entropy.parse::<f64>().is_err() {
            errors.push(format!(
                "target_entropy: `auto` or a number, got `{}`",
                self.target_entropy
            ));
        }
        if self.alpha_init < 0.0 {
            errors.push(format!("alpha_init: must be >= 0, got {}", self.alpha_init));
        }
        match self.backbone.parse::<Backbone>() {
            Err(e) => errors.push(format!("backbone: {e}")),
            Ok(Backbone::MlpConcat) => {
                if self.l_min != 1 || self.l_max != 1 {
                    errors.push(
                        "backbone: mlp_concat trains only with fixed one-step windows \
                         (l_min = l_max = 1); its flattened input cannot vary in length"
                            .into(),
                    );
                }
            }
            Ok(_) => {}
        }
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("dims_per_head", self.dims_per_head),
            ("ffn_hidden", self.ffn_hidden),
            ("policy_hidden", self.policy_hidden),
            ("n_action_samples", self.n_action_samples),
            ("capacity_segments", self.capacity_segments),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                errors.push(format!("{name}: must be >= 1"));
            }
        }
        for (name, v) in [
            ("lr_policy", self.lr_policy),
            ("lr_critic", self.lr_critic),
            ("lr_alpha", self.lr_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{name}: must be a positive number, got {v}"));
            }
        }
        if self.weight_decay < 0.0 {
            errors.push(format!(
                "weight_decay: must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.eval_interval == 0 {
            errors.push("eval_interval: must be >= 1".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }
}
