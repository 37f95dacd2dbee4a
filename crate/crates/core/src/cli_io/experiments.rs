//! End-to-end pipelines built from an [`ExperimentConfig`].

use crate::cli_io::config::ExperimentConfig;
use crate::metrics::{detect_collapse, maj_at_k, CollapseVerdict};
use crate::policy::sample_rollouts;
use crate::rewards::{LabelMode, LabelTable};
use crate::rng::{self, Purpose};
use crate::task_env::{curriculum_subset, Dataset, RolloutLog};
use crate::trainer::{
    climb_levels, eval_seed, run_training, test_time_train, LevelRun, NoObserver, Predictions, RunInputs,
    RunObserver, RunState, TrainConfig, TrainError,
};

/// Trains on the configured task and evaluates on its test split.
pub fn run_experiment(config: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<RunState, TrainError> {
    let (train, test) = config.datasets()?;
    run_on(config, &train, &test, None, observer)
}

pub fn run_on(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    offline_labels: Option<LabelTable>,
    observer: &mut dyn RunObserver,
) -> Result<RunState, TrainError> {
    let inputs = RunInputs {
        train,
        eval: test,
        init: config.base_params(),
        offline_labels,
    };
    run_training(inputs, &config.train, observer)
}

pub fn verdict(config: &ExperimentConfig, state: &RunState) -> Option<CollapseVerdict> {
    detect_collapse(&state.metrics_history, &config.collapse, config.task.alphabet_size)
}

/// Scores every training prompt with `probe_n` base-policy samples.
pub fn probe_log(config: &ExperimentConfig, train: &Dataset) -> Result<RolloutLog, TrainError> {
    let base = config.base_params();
    let mut log = RolloutLog::default();
    for p in &train.prompts {
        let mut s = rng::stream(config.seed(), Purpose::Probe, &[p.id]);
        let answers = sample_rollouts(&base, p, config.curriculum.probe_n, &mut s)?
            .into_iter()
            .map(|r| r.answer)
            .collect();
        log.insert(p.id, answers);
    }
    Ok(log)
}

/// The easiest `keep_fraction` of the training set under the configured criterion.
pub fn curriculum_train_set(config: &ExperimentConfig, train: &Dataset) -> Result<Dataset, TrainError> {
    let log = probe_log(config, train)?;
    Ok(curriculum_subset(
        train,
        &log,
        config.curriculum.criterion,
        config.curriculum.keep_fraction,
    )?)
}

pub fn run_curriculum(config: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<RunState, TrainError> {
    let (train, test) = config.datasets()?;
    let subset = curriculum_train_set(config, &train)?;
    run_on(config, &subset, &test, None, observer)
}

/// Ground truth on the first level for `climb.warmup_steps`, then the configured labels.
pub fn run_climb(config: &ExperimentConfig) -> Result<Vec<LevelRun>, TrainError> {
    let first = TrainConfig {
        steps: config.climb.warmup_steps,
        ..config.train.clone()
    };
    climb_levels(&config.climb.levels, config.base_params(), &first, &config.train, |level| {
        Ok(config.datasets_for_level(level)?)
    })
}

#[derive(Debug, Clone)]
pub struct TttOutcome {
    pub state: RunState,
    pub predictions: Predictions,
    pub baseline_maj: f64,
    pub final_maj: f64,
}

/// Self-labelled training on `task.test_size` unlabeled prompts.
pub fn run_ttt(config: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<TttOutcome, TrainError> {
    let (_, test) = config.datasets()?;
    let init = config.base_params();
    let k = config.train.eval_k;
    let baseline_maj = maj_at_k(&init, &test, k, eval_seed(config.seed(), 0))?;
    let cfg = TrainConfig {
        label_mode: LabelMode::SelfCurrent,
        ..config.train.clone()
    };
    let (state, predictions) = test_time_train(&test, init, &cfg, observer)?;
    let hits = predictions
        .iter()
        .zip(&test.prompts)
        .filter(|((_, pred), p)| *pred == Some(p.correct_answer))
        .count();
    Ok(TttOutcome {
        final_maj: hits as f64 / test.len() as f64,
        state,
        predictions,
        baseline_maj,
    })
}

/// Runs `config` once per seed.
pub fn run_seeds(config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunState>, TrainError> {
    seeds
        .iter()
        .map(|&s| run_experiment(&config.with_seed(s), &mut NoObserver))
        .collect()
}
