//! Training loop orchestration and its protocol variants.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::metrics::{self, majority_predictions, sample_eval, MetricsRow};
use crate::policy::{kl_to_reference, sample_rollouts, PolicyError, PolicyParams, Rollout};
use crate::rewards::{
    apply_kl_in_reward, ground_truth_reward, make_labels, majority_vote, srt_reward, LabelMode, LabelSource,
    LabelTable, RewardError,
};
use crate::rl_core::{assemble_gradient, apply_update, compute_advantage, Estimator, RlError, RolloutGroup, SurrogateConfig, UpdateReport};
use crate::rng::{self, Purpose};
use crate::task_env::{split_validation, Dataset, Prompt, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("output sink failed: {0}")]
    Sink(String),
    #[error("empty validation score series")]
    EmptyScores,
    #[error("test-time training needs SelfCurrent labels, got {0}")]
    NotSelfLabelled(LabelMode),
    #[error("levels must be non-empty and strictly ascending")]
    BadLevels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlPlacement {
    InReward,
    InLoss,
}

impl fmt::Display for KlPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlPlacement::InReward => "in-reward",
            KlPlacement::InLoss => "in-loss",
        })
    }
}

impl FromStr for KlPlacement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in-reward" | "InReward" | "reward" => Ok(KlPlacement::InReward),
            "in-loss" | "InLoss" | "loss" => Ok(KlPlacement::InLoss),
            other => Err(format!("unknown KL placement `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub val_fraction: f64,
    /// Evaluations without validation improvement before training halts; 0 never halts.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Estimator,
    pub label_mode: LabelMode,
    pub n_per_prompt: usize,
    /// Votes per pseudo-label; `None` uses `n_per_prompt`. SelfCurrent reuses
    /// the training rollouts whenever the two counts agree.
    pub n_label: Option<usize>,
    pub batch_prompts: usize,
    pub learning_rate: f64,
    pub kl_beta: f64,
    pub kl_placement: KlPlacement,
    pub entropy_alpha: f64,
    pub steps: u64,
    pub eval_every: u64,
    pub eval_k: usize,
    pub filter_threshold: Option<f64>,
    /// Candidate prompts tried per accepted slot before a partial batch is returned.
    pub filter_attempts_factor: usize,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
    pub grpo_eps: f64,
    pub clip_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Estimator::Rloo,
            label_mode: LabelMode::SelfCurrent,
            n_per_prompt: 16,
            n_label: None,
            batch_prompts: 32,
            learning_rate: 0.5,
            kl_beta: 0.001,
            kl_placement: KlPlacement::InReward,
            entropy_alpha: 0.0,
            steps: 200,
            eval_every: 20,
            eval_k: 16,
            filter_threshold: None,
            filter_attempts_factor: 50,
            early_stop: None,
            seed: 0,
            grpo_eps: 1e-6,
            clip_eps: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let min_n = match self.algorithm {
            Estimator::MeanBaseline => 1,
            Estimator::Rloo | Estimator::Grpo => 2,
        };
        if self.n_per_prompt < min_n {
            return bad(format!("{} needs n_per_prompt >= {min_n}", self.algorithm));
        }
        if self.n_label == Some(0) {
            return bad("n_label must be positive".into());
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.kl_beta >= 0.0 && self.entropy_alpha >= 0.0) {
            return bad("kl_beta and entropy_alpha must be non-negative".into());
        }
        if self.eval_every == 0 || self.eval_k == 0 {
            return bad("eval_every and eval_k must be positive".into());
        }
        if let Some(t) = self.filter_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("filter_threshold must lie in (0, 1], got {t}"));
            }
        }
        if self.filter_attempts_factor == 0 {
            return bad("filter_attempts_factor must be positive".into());
        }
        if let Some(es) = self.early_stop {
            if !(es.val_fraction > 0.0 && es.val_fraction < 1.0) {
                return bad(format!("val_fraction must lie in (0, 1), got {}", es.val_fraction));
            }
        }
        if !(self.clip_eps > 0.0 && self.grpo_eps > 0.0) {
            return bad("clip_eps and grpo_eps must be positive".into());
        }
        Ok(())
    }

    pub fn label_votes(&self) -> usize {
        self.n_label.unwrap_or(self.n_per_prompt)
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            entropy_alpha: self.entropy_alpha,
            kl_beta_loss: match self.kl_placement {
                KlPlacement::InLoss => self.kl_beta,
                KlPlacement::InReward => 0.0,
            },
            clip_eps: self.clip_eps,
        }
    }
}

/// Position in the without-replacement prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BatchCursor {
    pub epoch: u64,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub step: u64,
    pub params: PolicyParams,
    base_params: PolicyParams,
    pub metrics_history: Vec<MetricsRow>,
    /// Validation scores at each evaluation step (early stopping only).
    pub val_history: Vec<(u64, f64)>,
    pub best_val: Option<(u64, f64)>,
    pub best_params: Option<PolicyParams>,
    pub cursor: BatchCursor,
    pub skipped_steps: u64,
    pub warnings: Vec<String>,
    pub last_report: UpdateReport,
}

impl RunState {
    pub fn new(init: PolicyParams) -> Self {
        RunState {
            step: 0,
            base_params: init.clone(),
            params: init,
            metrics_history: Vec::new(),
            val_history: Vec::new(),
            best_val: None,
            best_params: None,
            cursor: BatchCursor::default(),
            skipped_steps: 0,
            warnings: Vec::new(),
            last_report: UpdateReport::default(),
        }
    }

    /// Frozen starting policy; also the KL reference.
    pub fn base_params(&self) -> &PolicyParams {
        &self.base_params
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// A batch entry, optionally carrying rollouts drawn while filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub prompt: Prompt,
    /// Epoch the prompt was drawn in; keys its rollout stream.
    pub epoch: u64,
    pub rollouts: Option<Vec<Rollout>>,
}

/// Rollout stream for one prompt at one step. The epoch key keeps a prompt
/// revisited within a step (after wrapping the dataset) on a fresh stream.
pub fn rollout_stream(seed: u64, step: u64, prompt_id: u64, epoch: u64) -> rng::Stream {
    rng::stream(seed, Purpose::Rollout, &[step, prompt_id, epoch])
}

fn label_stream(seed: u64, step: u64, prompt_id: u64) -> rng::Stream {
    rng::stream(seed, Purpose::Teacher, &[step, prompt_id])
}

/// Shuffled prompt order for `epoch`.
pub fn epoch_order(dataset: &Dataset, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Batch, &[epoch]));
    order
}

fn next_index(dataset: &Dataset, seed: u64, cursor: &mut BatchCursor, order: &mut Vec<usize>) -> (usize, u64) {
    if cursor.position >= order.len() {
        cursor.epoch += 1;
        cursor.position = 0;
        *order = epoch_order(dataset, seed, cursor.epoch);
    }
    let idx = order[cursor.position];
    cursor.position += 1;
    (idx, cursor.epoch)
}

/// Next `batch_prompts` prompts without replacement; rollouts are drawn in [`srt_step`].
pub fn plain_batch(state: &mut RunState, dataset: &Dataset, config: &TrainConfig) -> Vec<BatchItem> {
    let mut order = epoch_order(dataset, config.seed, state.cursor.epoch);
    (0..config.batch_prompts)
        .map(|_| {
            let (idx, epoch) = next_index(dataset, config.seed, &mut state.cursor, &mut order);
            BatchItem {
                prompt: dataset.prompts[idx].clone(),
                epoch,
                rollouts: None,
            }
        })
        .collect()
}

/// Walks the same prompt order as [`plain_batch`], keeping prompts whose
/// rollout majority fraction reaches the threshold. Accepted rollouts are
/// cached for the update. Returns a partial batch after
/// `filter_attempts_factor * batch_prompts` candidates.
pub fn dynamic_filter_batch(
    state: &mut RunState,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<BatchItem>, TrainError> {
    let threshold = config
        .filter_threshold
        .ok_or_else(|| TrainError::InvalidConfig("dynamic filtering needs filter_threshold".into()))?;
    filter_with_threshold(state, dataset, config, threshold)
}

fn filter_with_threshold(
    state: &mut RunState,
    dataset: &Dataset,
    config: &TrainConfig,
    threshold: f64,
) -> Result<Vec<BatchItem>, TrainError> {
    let step = state.step;
    let cap = config.filter_attempts_factor * config.batch_prompts;
    let mut order = epoch_order(dataset, config.seed, state.cursor.epoch);
    let mut batch = Vec::with_capacity(config.batch_prompts);
    let mut attempts = 0;
    while batch.len() < config.batch_prompts && attempts < cap {
        attempts += 1;
        let (idx, epoch) = next_index(dataset, config.seed, &mut state.cursor, &mut order);
        let prompt = &dataset.prompts[idx];
        let mut s = rollout_stream(config.seed, step, prompt.id, epoch);
        let rollouts = sample_rollouts(&state.params, prompt, config.n_per_prompt, &mut s)?;
        let answers: Vec<usize> = rollouts.iter().map(|r| r.answer).collect();
        if majority_vote(prompt.id, &answers, state.params.k).majority_fraction >= threshold {
            batch.push(BatchItem {
                prompt: prompt.clone(),
                epoch,
                rollouts: Some(rollouts),
            });
        }
    }
    if batch.len() < config.batch_prompts {
        state.warn(format!(
            "step {step}: filter accepted {} of {} prompts after {attempts} attempts",
            batch.len(),
            config.batch_prompts
        ));
    }
    Ok(batch)
}

/// One update: rollouts, pseudo-labels, rewards, KL shaping, advantages and
/// a gradient step. Abstaining prompts are dropped; if none remain the step
/// is skipped with a warning. The step counter always advances.
pub fn srt_step(
    state: &mut RunState,
    batch: &[BatchItem],
    config: &TrainConfig,
    source: &LabelSource,
) -> Result<UpdateReport, TrainError> {
    let step = state.step;
    let mut groups = Vec::with_capacity(batch.len());
    for item in batch {
        let prompt = &item.prompt;
        let rollouts = match &item.rollouts {
            Some(r) => r.clone(),
            None => {
                let mut s = rollout_stream(config.seed, step, prompt.id, item.epoch);
                sample_rollouts(&state.params, prompt, config.n_per_prompt, &mut s)?
            }
        };
        let rewards: Vec<f64> = match source {
            LabelSource::GroundTruth => rollouts.iter().map(|r| ground_truth_reward(r, prompt)).collect(),
            _ => {
                let reuse = match source {
                    LabelSource::SelfCurrent { n_label } if *n_label == rollouts.len() => Some(rollouts.as_slice()),
                    _ => None,
                };
                let mut s = label_stream(config.seed, step, prompt.id);
                let (label, _) = make_labels(source, prompt, &state.params, &mut s, reuse)?;
                if label.is_abstain() {
                    continue;
                }
                rollouts
                    .iter()
                    .map(|r| srt_reward(r, &label))
                    .collect::<Result<_, _>>()?
            }
        };
        groups.push(RolloutGroup {
            prompt: prompt.clone(),
            rollouts,
            rewards,
        });
    }

    if groups.is_empty() {
        state.skipped_steps += 1;
        state.warn(format!("step {step}: every prompt abstained, update skipped"));
        state.step += 1;
        state.last_report = UpdateReport::default();
        return Ok(state.last_report);
    }

    let mut with_adv = Vec::with_capacity(groups.len());
    for group in groups {
        let shaped = match config.kl_placement {
            KlPlacement::InReward if config.kl_beta > 0.0 => {
                let kl = kl_to_reference(
                    &state.params,
                    &state.base_params,
                    std::slice::from_ref(&group.prompt),
                    &group.rollouts,
                )?;
                apply_kl_in_reward(&group.rewards, &kl.per_rollout, config.kl_beta)?
            }
            _ => group.rewards.clone(),
        };
        let adv = compute_advantage(config.algorithm, group.prompt.id, &shaped, config.grpo_eps)?;
        with_adv.push((group, adv));
    }
    let (grad, report) = assemble_gradient(&with_adv, &state.params, &state.base_params, &config.surrogate())?;
    if !grad.is_zero() {
        state.params = apply_update(&state.params, &grad, config.learning_rate)?;
    }
    state.step += 1;
    state.last_report = report;
    Ok(report)
}

/// Receives evaluation rows and checkpoints as training progresses.
pub trait RunObserver {
    fn on_eval(&mut self, _row: &MetricsRow, _params: &PolicyParams) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_best(&mut self, _step: u64, _params: &PolicyParams) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that discards everything.
pub struct NoObserver;

impl RunObserver for NoObserver {}

/// Everything a run needs besides its config.
#[derive(Debug, Clone)]
pub struct RunInputs<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub init: PolicyParams,
    pub offline_labels: Option<LabelTable>,
}

/// Builds the label source for `mode`. Teachers are frozen copies of `init`.
pub fn label_source(
    mode: LabelMode,
    config: &TrainConfig,
    init: &PolicyParams,
    offline: Option<LabelTable>,
) -> Result<LabelSource, TrainError> {
    Ok(match mode {
        LabelMode::GroundTruth => LabelSource::GroundTruth,
        LabelMode::SelfCurrent => LabelSource::SelfCurrent {
            n_label: config.label_votes(),
        },
        LabelMode::FixedTeacher => LabelSource::FixedTeacher {
            teacher: init.clone(),
            n_label: config.label_votes(),
        },
        LabelMode::Offline => LabelSource::Offline {
            table: offline.ok_or_else(|| TrainError::InvalidConfig("Offline labels need a label table".into()))?,
        },
    })
}

/// Seed for the evaluation samples taken at `step`.
pub fn eval_seed(seed: u64, step: u64) -> u64 {
    rng::derive_seed(seed, Purpose::Eval, &[step])
}

fn validation_seed(seed: u64, step: u64) -> u64 {
    rng::derive_seed(seed, Purpose::Validation, &[step])
}

/// Runs `config.steps` updates, evaluating on `inputs.eval` at step 0, every
/// `eval_every` steps and at the final step.
pub fn run_training(
    inputs: RunInputs<'_>,
    config: &TrainConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunState, TrainError> {
    config.validate()?;
    if inputs.train.is_empty() {
        return Err(TrainError::InvalidConfig("training dataset is empty".into()));
    }
    if let Some(table) = &inputs.offline_labels {
        if config.label_mode == LabelMode::Offline && !table.covers(inputs.train) {
            return Err(TrainError::InvalidConfig("label table does not cover the training set".into()));
        }
    }
    let (train, val) = match config.early_stop {
        Some(es) => {
            let (t, v) = split_validation(inputs.train, es.val_fraction, config.seed)?;
            (t, Some(v))
        }
        None => (inputs.train.clone(), None),
    };
    let source = label_source(config.label_mode, config, &inputs.init, inputs.offline_labels)?;
    let mut state = RunState::new(inputs.init);
    let mut stale_evals = 0usize;

    loop {
        let at_eval = state.step.is_multiple_of(config.eval_every) || state.step == config.steps;
        if at_eval {
            let row = metrics::evaluate(
                &state.params,
                &state.base_params,
                inputs.eval,
                config.eval_k,
                eval_seed(config.seed, state.step),
                state.step,
                state.last_report.clip_fraction,
            )?;
            observer.on_eval(&row, &state.params)?;
            state.metrics_history.push(row);
            if let Some(val) = &val {
                let score = metrics::avg_at_k(
                    &state.params,
                    val,
                    config.eval_k,
                    validation_seed(config.seed, state.step),
                )?;
                state.val_history.push((state.step, score));
                if state.best_val.is_none_or(|(_, best)| score > best) {
                    state.best_val = Some((state.step, score));
                    state.best_params = Some(state.params.clone());
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                }
            }
        }
        if state.step >= config.steps {
            break;
        }
        if let Some(es) = config.early_stop {
            if es.patience > 0 && stale_evals >= es.patience {
                let msg = format!("step {}: validation stalled for {} evaluations, stopping", state.step, es.patience);
                state.warn(msg);
                break;
            }
        }
        let batch = match config.filter_threshold {
            Some(_) => dynamic_filter_batch(&mut state, &train, config)?,
            None => plain_batch(&mut state, &train, config),
        };
        if batch.is_empty() {
            state.skipped_steps += 1;
            state.step += 1;
            continue;
        }
        srt_step(&mut state, &batch, config, &source)?;
    }

    if let (Some((step, _)), Some(params)) = (state.best_val, &state.best_params) {
        observer.on_best(step, params)?;
    }
    Ok(state)
}

/// Step with the highest validation score; ties resolve to the earliest step.
pub fn early_stop_select(val_scores: &[(u64, f64)]) -> Result<u64, TrainError> {
    let (first, rest) = val_scores.split_first().ok_or(TrainError::EmptyScores)?;
    let best = rest
        .iter()
        .fold(first, |best, s| if s.1 > best.1 { s } else { best });
    Ok(best.0)
}

/// One level of a climb: the datasets and the resulting run.
#[derive(Debug, Clone)]
pub struct LevelRun {
    pub level: u32,
    pub initial_params: PolicyParams,
    pub state: RunState,
}

/// Trains each level from the previous level's final parameters. The first
/// level uses ground-truth labels, later levels use the configured
/// self-labelling mode. `datasets(level)` returns `(train, eval)`.
pub fn climb_levels<F>(
    levels: &[u32],
    init: PolicyParams,
    first_config: &TrainConfig,
    later_config: &TrainConfig,
    mut datasets: F,
) -> Result<Vec<LevelRun>, TrainError>
where
    F: FnMut(u32) -> Result<(Dataset, Dataset), TrainError>,
{
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TrainError::BadLevels);
    }
    let mut params = init;
    let mut runs = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        let (train, eval) = datasets(level)?;
        let config = if i == 0 {
            TrainConfig {
                label_mode: LabelMode::GroundTruth,
                ..first_config.clone()
            }
        } else {
            later_config.clone()
        };
        let inputs = RunInputs {
            train: &train,
            eval: &eval,
            init: params.clone(),
            offline_labels: None,
        };
        let state = run_training(inputs, &config, &mut NoObserver)?;
        let initial_params = std::mem::replace(&mut params, state.params.clone());
        runs.push(LevelRun {
            level,
            initial_params,
            state,
        });
    }
    Ok(runs)
}

/// Majority prediction per test prompt (`None` when all samples were malformed).
pub type Predictions = Vec<(u64, Option<usize>)>;

/// Self-labelled training directly on the test prompts, followed by
/// `eval_k`-sample majority predictions. Correct answers only enter the
/// reported metrics.
pub fn test_time_train(
    test: &Dataset,
    init: PolicyParams,
    config: &TrainConfig,
    observer: &mut dyn RunObserver,
) -> Result<(RunState, Predictions), TrainError> {
    if config.label_mode != LabelMode::SelfCurrent {
        return Err(TrainError::NotSelfLabelled(config.label_mode));
    }
    let inputs = RunInputs {
        train: test,
        eval: test,
        init,
        offline_labels: None,
    };
    let state = run_training(inputs, config, observer)?;
    let samples = sample_eval(&state.params, test, config.eval_k, eval_seed(config.seed, state.step))?;
    let predictions = majority_predictions(&samples, state.params.k);
    Ok((state, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BaseInit;
    use crate::task_env::{generate_dataset, Family};

    fn setup(level: u32, size: usize, seed: u64) -> (Dataset, PolicyParams) {
        let ds = generate_dataset(Family::NoisyEvidence, level, size, 4, 4, seed).unwrap();
        let p = PolicyParams::base(4, 4, &BaseInit::default());
        (ds, p)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            steps: 10,
            eval_every: 5,
            batch_prompts: 8,
            n_per_prompt: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rloo_example_from_votes() {
        let adv = compute_advantage(Estimator::Rloo, 0, &[1.0, 1.0, 0.0], 1e-6).unwrap();
        assert_eq!(adv.values, vec![0.5, 0.5, -1.0]);
        let v = majority_vote(0, &[2, 2, 1], 3);
        assert_eq!(v.label, Some(2));
    }

    #[test]
    fn zero_steps_is_one_baseline_eval() {
        let (ds, p) = setup(2, 50, 1);
        let cfg = TrainConfig {
            steps: 0,
            ..quick_config()
        };
        let inputs = RunInputs {
            train: &ds,
            eval: &ds,
            init: p.clone(),
            offline_labels: None,
        };
        let st = run_training(inputs, &cfg, &mut NoObserver).unwrap();
        assert_eq!(st.params, p);
        assert_eq!(st.metrics_history.len(), 1);
        assert_eq!(st.metrics_history[0].step, 0);
    }

    #[test]
    fn runs_are_deterministic_and_keep_base() {
        let (ds, p) = setup(2, 60, 2);
        let run = || {
            let inputs = RunInputs {
                train: &ds,
                eval: &ds,
                init: p.clone(),
                offline_labels: None,
            };
            run_training(inputs, &quick_config(), &mut NoObserver).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.metrics_history, b.metrics_history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.base_params(), &p);
        assert_ne!(a.params, p);
        let steps: Vec<u64> = a.metrics_history.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10]);
    }

    #[test]
    fn unanimous_batch_is_fixed_point() {
        let (ds, mut p) = setup(1, 20, 4);
        p.bias[2] = 500.0;
        for est in [Estimator::MeanBaseline, Estimator::Rloo, Estimator::Grpo] {
            let cfg = TrainConfig {
                algorithm: est,
                ..quick_config()
            };
            let mut st = RunState::new(p.clone());
            let batch = plain_batch(&mut st, &ds, &cfg);
            srt_step(&mut st, &batch, &cfg, &LabelSource::SelfCurrent { n_label: 6 }).unwrap();
            assert_eq!(st.params, p);
            assert_eq!(st.step, 1);
        }
    }

    #[test]
    fn all_abstain_skips_step() {
        let (ds, mut p) = setup(1, 20, 4);
        p.bias[4] = 500.0;
        let cfg = quick_config();
        let mut st = RunState::new(p.clone());
        let batch = plain_batch(&mut st, &ds, &cfg);
        srt_step(&mut st, &batch, &cfg, &LabelSource::SelfCurrent { n_label: 6 }).unwrap();
        assert_eq!(st.skipped_steps, 1);
        assert_eq!(st.warnings.len(), 1);
        assert_eq!(st.params, p);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let (ds, p) = setup(1, 10, 4);
        let cfg = TrainConfig {
            batch_prompts: 5,
            ..quick_config()
        };
        let mut st = RunState::new(p);
        let mut ids: Vec<u64> = plain_batch(&mut st, &ds, &cfg)
            .into_iter()
            .chain(plain_batch(&mut st, &ds, &cfg))
            .map(|b| b.prompt.id)
            .collect();
        ids.sort();
        assert_eq!(ids, ds.ids());
        plain_batch(&mut st, &ds, &cfg);
        assert_eq!(st.cursor.epoch, 1);
    }

    #[test]
    fn filter_threshold_zero_matches_plain_batches() {
        let (ds, p) = setup(3, 40, 5);
        let cfg = quick_config();
        let mut a = RunState::new(p.clone());
        let mut b = RunState::new(p);
        for _ in 0..7 {
            let plain = plain_batch(&mut a, &ds, &cfg);
            let filtered = filter_with_threshold(&mut b, &ds, &cfg, 0.0).unwrap();
            let src = LabelSource::SelfCurrent { n_label: 6 };
            let ra = srt_step(&mut a, &plain, &cfg, &src).unwrap();
            let rb = srt_step(&mut b, &filtered, &cfg, &src).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn filter_keeps_only_consistent_groups() {
        let (ds, p) = setup(4, 80, 6);
        let cfg = TrainConfig {
            filter_threshold: Some(0.6),
            ..quick_config()
        };
        let mut st = RunState::new(p.clone());
        let batch = dynamic_filter_batch(&mut st, &ds, &cfg).unwrap();
        for item in &batch {
            let answers: Vec<usize> = item.rollouts.as_ref().unwrap().iter().map(|r| r.answer).collect();
            assert!(majority_vote(0, &answers, 4).majority_fraction >= 0.6);
        }
        let strict = TrainConfig {
            filter_threshold: Some(1.0),
            n_per_prompt: 16,
            filter_attempts_factor: 1,
            ..quick_config()
        };
        let mut st = RunState::new(p);
        let batch = dynamic_filter_batch(&mut st, &ds, &strict).unwrap();
        assert!(batch.len() < strict.batch_prompts);
        assert_eq!(st.warnings.len(), 1);
    }

    #[test]
    fn early_stop_selection() {
        assert_eq!(early_stop_select(&[(100, 0.5), (200, 0.7), (300, 0.6)]).unwrap(), 200);
        assert_eq!(early_stop_select(&[(0, 0.1), (1, 0.2), (2, 0.3)]).unwrap(), 2);
        assert_eq!(early_stop_select(&[(0, 0.4), (1, 0.4)]).unwrap(), 0);
        assert!(matches!(early_stop_select(&[]), Err(TrainError::EmptyScores)));
    }

    #[test]
    fn climb_chains_parameters() {
        let p = PolicyParams::base(4, 4, &BaseInit::default());
        let cfg = quick_config();
        let runs = climb_levels(&[1, 3, 5], p.clone(), &cfg, &cfg, |level| {
            let d = generate_dataset(Family::Plurality, level, 30, 4, 4, level as u64).map_err(TrainError::from)?;
            Ok((d.clone(), d))
        })
        .unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].initial_params, p);
        assert_eq!(runs[2].initial_params, runs[1].state.params);
        assert_eq!(runs[1].initial_params, runs[0].state.params);
        assert!(matches!(
            climb_levels(&[3, 1], p, &cfg, &cfg, |_| unreachable!()),
            Err(TrainError::BadLevels)
        ));
    }

    #[test]
    fn ttt_with_zero_steps_is_base_majority() {
        let (ds, p) = setup(3, 30, 7);
        let cfg = TrainConfig {
            steps: 0,
            eval_k: 8,
            ..quick_config()
        };
        let (st, preds) = test_time_train(&ds, p.clone(), &cfg, &mut NoObserver).unwrap();
        let samples = sample_eval(&p, &ds, 8, eval_seed(cfg.seed, 0)).unwrap();
        assert_eq!(preds, majority_predictions(&samples, 4));
        assert_eq!(st.params, p);
        let gt = TrainConfig {
            label_mode: LabelMode::GroundTruth,
            ..cfg
        };
        assert!(matches!(
            test_time_train(&ds, p, &gt, &mut NoObserver),
            Err(TrainError::NotSelfLabelled(_))
        ));
    }
}
