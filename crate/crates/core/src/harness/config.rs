use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scene::SceneConfig;
use super::HarnessError;
use crate::exec::Execution;
use crate::grpo::GrpoConfig;
use crate::rewards::{AccuracyThresholds, L1Aggregation, LengthConfig, RewardConfig, RewardMode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyPreset {
    #[default]
    Default,
    /// Never answers on the first pass, so every group starts at zero accuracy.
    ColdStart,
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub normalize_by_std: bool,
    pub epsilon: f64,
    pub kl_beta: f64,
    pub anchor_n0: f64,
    pub gamma: f64,
    pub enable_desc: bool,
    pub enable_len: bool,
    pub reward_mode: RewardMode,
    pub box_l1_mode: L1Aggregation,
    /// Share of training queries drawn as hard queries.
    pub hard_fraction: f64,
    /// Number of distinct training scenes.
    pub suite_size: usize,
    /// Number of held-out evaluation cases.
    pub eval_size: usize,
    pub scene: SceneConfig,
    pub mask_noise: f64,
    pub policy_preset: PolicyPreset,
    #[serde(skip, default)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let grpo = GrpoConfig::default();
        let len = LengthConfig::default();
        Self {
            seed: 0,
            steps: 200,
            batch_size: grpo.batch_size,
            group_size: grpo.group_size,
            learning_rate: grpo.learning_rate,
            normalize_by_std: grpo.normalize_by_std,
            epsilon: grpo.epsilon,
            kl_beta: grpo.kl_beta,
            anchor_n0: len.anchor_n0,
            gamma: len.gamma,
            enable_desc: true,
            enable_len: true,
            reward_mode: RewardMode::BoxPoint,
            box_l1_mode: L1Aggregation::Sum,
            hard_fraction: 0.5,
            suite_size: 256,
            eval_size: 128,
            scene: SceneConfig::default(),
            mask_noise: 0.0,
            policy_preset: PolicyPreset::Default,
            execution: Execution::default(),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

impl TrainConfig {
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            length: LengthConfig {
                anchor_n0: self.anchor_n0,
                gamma: self.gamma,
            },
            thresholds: AccuracyThresholds {
                box_l1_mode: self.box_l1_mode,
                ..AccuracyThresholds::default()
            },
            enable_desc: self.enable_desc,
            enable_len: self.enable_len,
            mode: self.reward_mode,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            normalize_by_std: self.normalize_by_std,
            epsilon: self.epsilon,
            kl_beta: self.kl_beta,
            group_size: self.group_size,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.grpo_config()
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        self.scene.validate()?;
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if !(self.anchor_n0 >= 0.0 && self.gamma >= 0.0) {
            return bad("anchor_n0 and gamma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad(format!("hard_fraction {} outside [0, 1]", self.hard_fraction));
        }
        if !(0.0..=1.0).contains(&self.mask_noise) {
            return bad(format!("mask_noise {} outside [0, 1]", self.mask_noise));
        }
        if self.suite_size == 0 || self.eval_size == 0 {
            return bad("suite_size and eval_size must be positive".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            cfg.set(key, value.trim()).map_err(|m| err(format!("{key}: {m}")))?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "steps" => self.steps = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "group_size" => self.group_size = parse_num(v)?,
            "learning_rate" => self.learning_rate = parse_num(v)?,
            "normalize_by_std" => self.normalize_by_std = parse_bool(v)?,
            "epsilon" => self.epsilon = parse_num(v)?,
            "kl_beta" => self.kl_beta = parse_num(v)?,
            "anchor_n0" => self.anchor_n0 = parse_num(v)?,
            "gamma" => self.gamma = parse_num(v)?,
            "enable_desc" => self.enable_desc = parse_bool(v)?,
            "enable_len" => self.enable_len = parse_bool(v)?,
            "reward_mode" => {
                self.reward_mode = match v {
                    "box_point" => RewardMode::BoxPoint,
                    "mask" => RewardMode::Mask,
                    _ => return Err(format!("reward_mode must be box_point or mask, got {v:?}")),
                }
            }
            "box_l1_mode" => {
                self.box_l1_mode = match v {
                    "sum" => L1Aggregation::Sum,
                    "mean" => L1Aggregation::Mean,
                    _ => return Err(format!("box_l1_mode must be sum or mean, got {v:?}")),
                }
            }
            "hard_fraction" => self.hard_fraction = parse_num(v)?,
            "suite_size" => self.suite_size = parse_num(v)?,
            "eval_size" => self.eval_size = parse_num(v)?,
            "min_objects" => self.scene.min_objects = parse_num(v)?,
            "max_objects" => self.scene.max_objects = parse_num(v)?,
            "duplicate_prob" => self.scene.duplicate_prob = parse_num(v)?,
            "mask_noise" => self.mask_noise = parse_num(v)?,
            "policy_preset" => {
                self.policy_preset = match v {
                    "default" => PolicyPreset::Default,
                    "cold_start" => PolicyPreset::ColdStart,
                    _ => return Err(format!("policy_preset must be default or cold_start, got {v:?}")),
                }
            }
            "execution" => {
                self.execution = match v {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(format!("execution must be parallel or sequential, got {v:?}")),
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("group_size", self.group_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("normalize_by_std", self.normalize_by_std.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("kl_beta", self.kl_beta.to_string());
        kv("anchor_n0", self.anchor_n0.to_string());
        kv("gamma", self.gamma.to_string());
        kv("enable_desc", self.enable_desc.to_string());
        kv("enable_len", self.enable_len.to_string());
        kv(
            "reward_mode",
            match self.reward_mode {
                RewardMode::BoxPoint => "box_point",
                RewardMode::Mask => "mask",
            }
            .into(),
        );
        kv(
            "box_l1_mode",
            match self.box_l1_mode {
                L1Aggregation::Sum => "sum",
                L1Aggregation::Mean => "mean",
            }
            .into(),
        );
        kv("hard_fraction", self.hard_fraction.to_string());
        kv("suite_size", self.suite_size.to_string());
        kv("eval_size", self.eval_size.to_string());
        kv("min_objects", self.scene.min_objects.to_string());
        kv("max_objects", self.scene.max_objects.to_string());
        kv("duplicate_prob", self.scene.duplicate_prob.to_string());
        kv("mask_noise", self.mask_noise.to_string());
        kv(
            "policy_preset",
            match self.policy_preset {
                PolicyPreset::Default => "default",
                PolicyPreset::ColdStart => "cold_start",
            }
            .into(),
        );
        kv(
            "execution",
            match self.execution {
                Execution::Parallel => "parallel",
                Execution::Sequential => "sequential",
            }
            .into(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.anchor_n0, c.gamma), (45.0, 0.05));
        assert_eq!((c.group_size, c.batch_size), (8, 16));
        assert_eq!(c.kl_beta, 0.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        let mut c = TrainConfig::default();
        c.seed = 9;
        c.gamma = 0.2;
        c.reward_mode = RewardMode::Mask;
        c.policy_preset = PolicyPreset::ColdStart;
        c.execution = Execution::Sequential;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);

        let parsed = TrainConfig::parse("# comment\nsteps = 3  # trailing\n\nenable_len=off\n").unwrap();
        assert_eq!((parsed.steps, parsed.enable_len), (3, false));
        let e = TrainConfig::parse("steps = 3\nbogus = 1").unwrap_err();
        assert_eq!(e.line, 2);
        assert_eq!(e.to_string(), "config line 2: bogus: unknown key");
        assert!(TrainConfig::parse("gamma = x").unwrap_err().message.starts_with("gamma: "));
        assert!(TrainConfig::parse("steps").is_err());
        assert!(TrainConfig::parse("gamma = fast").is_err());
    }
}
