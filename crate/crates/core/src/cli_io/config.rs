//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::metrics::CollapseThresholds;
use crate::policy::{BaseInit, PolicyParams};
use crate::rewards::LabelMode;
use crate::rl_core::Estimator;
use crate::rng::{self, Purpose};
use crate::task_env::{generate_dataset_with, CurriculumCriterion, Dataset, Difficulty, Family, TaskError};
use crate::trainer::{EarlyStop, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("invalid training settings: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub family: Family,
    pub level: u32,
    pub alphabet_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Dataset seed; `None` reuses the run seed.
    pub data_seed: Option<u64>,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumConfig {
    pub criterion: CurriculumCriterion,
    pub keep_fraction: f64,
    /// Base-policy samples per prompt used to score difficulty.
    pub probe_n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimbConfig {
    pub levels: Vec<u32>,
    /// Steps of the ground-truth run on the first level.
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskConfig,
    pub init: BaseInit,
    pub train: TrainConfig,
    pub collapse: CollapseThresholds,
    pub curriculum: CurriculumConfig,
    pub climb: ClimbConfig,
    pub gap_thresholds: Vec<f64>,
    /// `accept.*` and `golden.*` entries, kept verbatim.
    pub extras: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "custom".into(),
            task: TaskConfig {
                family: Family::NoisyEvidence,
                level: 1,
                alphabet_size: 5,
                train_size: 2000,
                test_size: 500,
                data_seed: None,
                difficulty: Difficulty::default(),
            },
            init: BaseInit::default(),
            train: TrainConfig::default(),
            collapse: CollapseThresholds::default(),
            curriculum: CurriculumConfig {
                criterion: CurriculumCriterion::MajorityFrequency,
                keep_fraction: 1.0 / 3.0,
                probe_n: 16,
            },
            climb: ClimbConfig {
                levels: vec![1, 3, 5],
                warmup_steps: 200,
            },
            gap_thresholds: (0..=10).map(|i| i as f64 / 10.0).collect(),
            extras: BTreeMap::new(),
        }
    }
}

/// Every recognised key, in `--print-config` order.
pub const KEYS: &[&str] = &[
    "name",
    "task.family",
    "task.level",
    "task.alphabet_size",
    "task.train_size",
    "task.test_size",
    "task.data_seed",
    "task.noise_per_level",
    "task.plurality_base",
    "task.plurality_per_level",
    "policy.temperature",
    "policy.init_scale",
    "policy.malformed_bias",
    "train.algorithm",
    "train.label_mode",
    "train.n_per_prompt",
    "train.n_label",
    "train.batch_prompts",
    "train.learning_rate",
    "train.kl_beta",
    "train.kl_placement",
    "train.entropy_alpha",
    "train.steps",
    "train.eval_every",
    "train.eval_k",
    "train.filter_threshold",
    "train.filter_attempts_factor",
    "train.val_fraction",
    "train.patience",
    "train.seed",
    "train.grpo_eps",
    "train.clip_eps",
    "collapse.pr_min",
    "collapse.acc_chance_mult",
    "collapse.kl_mult",
    "curriculum.criterion",
    "curriculum.keep_fraction",
    "curriculum.probe_n",
    "climb.levels",
    "climb.warmup_steps",
    "gap.thresholds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn opt_str<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "name" => self.name = v.to_string(),
            "task.family" => self.task.family = parse(key, v)?,
            "task.level" => self.task.level = parse(key, v)?,
            "task.alphabet_size" => self.task.alphabet_size = parse(key, v)?,
            "task.train_size" => self.task.train_size = parse(key, v)?,
            "task.test_size" => self.task.test_size = parse(key, v)?,
            "task.data_seed" => self.task.data_seed = parse_opt(key, v)?,
            "task.noise_per_level" => self.task.difficulty.noise_per_level = parse(key, v)?,
            "task.plurality_base" => self.task.difficulty.plurality_base = parse(key, v)?,
            "task.plurality_per_level" => self.task.difficulty.plurality_per_level = parse(key, v)?,
            "policy.temperature" => self.init.temperature = parse(key, v)?,
            "policy.init_scale" => self.init.scale = parse(key, v)?,
            "policy.malformed_bias" => self.init.malformed_bias = parse(key, v)?,
            "train.algorithm" => t.algorithm = parse(key, v)?,
            "train.label_mode" => t.label_mode = parse(key, v)?,
            "train.n_per_prompt" => t.n_per_prompt = parse(key, v)?,
            "train.n_label" => t.n_label = parse_opt(key, v)?,
            "train.batch_prompts" => t.batch_prompts = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.kl_beta" => t.kl_beta = parse(key, v)?,
            "train.kl_placement" => t.kl_placement = parse(key, v)?,
            "train.entropy_alpha" => t.entropy_alpha = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.eval_k" => t.eval_k = parse(key, v)?,
            "train.filter_threshold" => t.filter_threshold = parse_opt(key, v)?,
            "train.filter_attempts_factor" => t.filter_attempts_factor = parse(key, v)?,
            "train.val_fraction" => match parse_opt::<f64>(key, v)? {
                None => t.early_stop = None,
                Some(f) => {
                    let patience = t.early_stop.map_or(0, |e| e.patience);
                    t.early_stop = Some(EarlyStop {
                        val_fraction: f,
                        patience,
                    });
                }
            },
            "train.patience" => {
                let p = parse(key, v)?;
                match &mut t.early_stop {
                    Some(es) => es.patience = p,
                    None if p == 0 => {}
                    None => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            reason: "set train.val_fraction first".into(),
                        })
                    }
                }
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.grpo_eps" => t.grpo_eps = parse(key, v)?,
            "train.clip_eps" => t.clip_eps = parse(key, v)?,
            "collapse.pr_min" => self.collapse.pr_min = parse(key, v)?,
            "collapse.acc_chance_mult" => self.collapse.acc_chance_mult = parse(key, v)?,
            "collapse.kl_mult" => self.collapse.kl_mult = parse(key, v)?,
            "curriculum.criterion" => self.curriculum.criterion = parse(key, v)?,
            "curriculum.keep_fraction" => self.curriculum.keep_fraction = parse(key, v)?,
            "curriculum.probe_n" => self.curriculum.probe_n = parse(key, v)?,
            "climb.levels" => self.climb.levels = parse_list(key, v)?,
            "climb.warmup_steps" => self.climb.warmup_steps = parse(key, v)?,
            "gap.thresholds" => self.gap_thresholds = parse_list(key, v)?,
            k if k.starts_with("accept.") || k.starts_with("golden.") => {
                self.extras.insert(k.to_string(), v.to_string());
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let t = &self.train;
        Ok(match key {
            "name" => self.name.clone(),
            "task.family" => self.task.family.to_string(),
            "task.level" => self.task.level.to_string(),
            "task.alphabet_size" => self.task.alphabet_size.to_string(),
            "task.train_size" => self.task.train_size.to_string(),
            "task.test_size" => self.task.test_size.to_string(),
            "task.data_seed" => opt_str(&self.task.data_seed),
            "task.noise_per_level" => self.task.difficulty.noise_per_level.to_string(),
            "task.plurality_base" => self.task.difficulty.plurality_base.to_string(),
            "task.plurality_per_level" => self.task.difficulty.plurality_per_level.to_string(),
            "policy.temperature" => self.init.temperature.to_string(),
            "policy.init_scale" => self.init.scale.to_string(),
            "policy.malformed_bias" => self.init.malformed_bias.to_string(),
            "train.algorithm" => t.algorithm.to_string(),
            "train.label_mode" => t.label_mode.to_string(),
            "train.n_per_prompt" => t.n_per_prompt.to_string(),
            "train.n_label" => opt_str(&t.n_label),
            "train.batch_prompts" => t.batch_prompts.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.kl_beta" => t.kl_beta.to_string(),
            "train.kl_placement" => t.kl_placement.to_string(),
            "train.entropy_alpha" => t.entropy_alpha.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.eval_k" => t.eval_k.to_string(),
            "train.filter_threshold" => opt_str(&t.filter_threshold),
            "train.filter_attempts_factor" => t.filter_attempts_factor.to_string(),
            "train.val_fraction" => opt_str(&t.early_stop.map(|e| e.val_fraction)),
            "train.patience" => t.early_stop.map_or(0, |e| e.patience).to_string(),
            "train.seed" => t.seed.to_string(),
            "train.grpo_eps" => t.grpo_eps.to_string(),
            "train.clip_eps" => t.clip_eps.to_string(),
            "collapse.pr_min" => self.collapse.pr_min.to_string(),
            "collapse.acc_chance_mult" => self.collapse.acc_chance_mult.to_string(),
            "collapse.kl_mult" => self.collapse.kl_mult.to_string(),
            "curriculum.criterion" => self.curriculum.criterion.to_string(),
            "curriculum.keep_fraction" => self.curriculum.keep_fraction.to_string(),
            "curriculum.probe_n" => self.curriculum.probe_n.to_string(),
            "climb.levels" => join(&self.climb.levels),
            "climb.warmup_steps" => self.climb.warmup_steps.to_string(),
            "gap.thresholds" => join(&self.gap_thresholds),
            k => self
                .extras
                .get(k)
                .cloned()
                .ok_or_else(|| ConfigError::UnknownKey(k.to_string()))?,
        })
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Fully resolved configuration; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS.iter().copied().chain(self.extras.keys().map(|k| k.as_str())) {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("known key"));
            out.push('\n');
        }
        out
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn data_seed(&self) -> u64 {
        self.task.data_seed.unwrap_or(self.train.seed)
    }

    pub fn base_params(&self) -> PolicyParams {
        let k = self.task.alphabet_size;
        PolicyParams::base(k, k, &self.init)
    }

    /// Training and test sets for `level`, drawn from independent seeds.
    pub fn datasets_for_level(&self, level: u32) -> Result<(Dataset, Dataset), TaskError> {
        let k = self.task.alphabet_size;
        let seed = self.data_seed();
        let train_seed = rng::derive_seed(seed, Purpose::Dataset, &[level as u64, 0]);
        let test_seed = rng::derive_seed(seed, Purpose::Dataset, &[level as u64, 1]);
        let d = &self.task.difficulty;
        let train = generate_dataset_with(d, self.task.family, level, self.task.train_size, k, k, train_seed)?;
        let test = generate_dataset_with(d, self.task.family, level, self.task.test_size, k, k, test_seed)?;
        Ok((train, test))
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset), TaskError> {
        self.datasets_for_level(self.task.level)
    }

    /// Required `accept.*` number.
    pub fn accept(&self, name: &str) -> Result<f64, ConfigError> {
        let key = format!("accept.{name}");
        let v = self.extras.get(&key).ok_or_else(|| ConfigError::Missing(key.clone()))?;
        parse(&key, v)
    }

    /// Required `accept.*` list, e.g. pinned seeds.
    pub fn accept_list<T: FromStr>(&self, name: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: Display,
    {
        let key = format!("accept.{name}");
        let v = self.extras.get(&key).ok_or_else(|| ConfigError::Missing(key.clone()))?;
        parse_list(&key, v)
    }

    /// Golden pass/fail outcome recorded for a criterion, if any.
    pub fn golden(&self, name: &str) -> Option<bool> {
        match self.extras.get(&format!("golden.{name}"))?.as_str() {
            "pass" => Some(true),
            "fail" => Some(false),
            _ => None,
        }
    }
}

/// Shorthand for tests and sweeps: label mode override.
pub fn with_label_mode(config: &ExperimentConfig, mode: LabelMode) -> ExperimentConfig {
    let mut c = config.clone();
    c.train.label_mode = mode;
    c
}

/// Shorthand for sweeps: algorithm override.
pub fn with_algorithm(config: &ExperimentConfig, algorithm: Estimator) -> ExperimentConfig {
    let mut c = config.clone();
    c.train.algorithm = algorithm;
    c
}
