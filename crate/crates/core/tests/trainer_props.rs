mod common;

use proptest::prelude::*;

use srt_core::policy::{BaseInit, PolicyParams};
use srt_core::rewards::{majority_vote, LabelMode, LabelSource};
use srt_core::rl_core::Estimator;
use srt_core::task_env::{generate_dataset, Dataset, Family};
use srt_core::trainer::{
    dynamic_filter_batch, plain_batch, run_training, srt_step, BatchItem, KlPlacement, NoObserver, RunInputs,
    RunState, TrainConfig,
};

use common::{bits, reference_step};

fn estimator() -> impl Strategy<Value = Estimator> {
    prop_oneof![Just(Estimator::MeanBaseline), Just(Estimator::Rloo), Just(Estimator::Grpo)]
}

fn placement() -> impl Strategy<Value = KlPlacement> {
    prop_oneof![Just(KlPlacement::InReward), Just(KlPlacement::InLoss)]
}

fn task(seed: u64) -> (Dataset, PolicyParams) {
    let ds = generate_dataset(Family::NoisyEvidence, 2, 24, 4, 4, seed).unwrap();
    (ds, PolicyParams::base(4, 4, &BaseInit::default()))
}

fn config(seed: u64, est: Estimator, placement: KlPlacement, mode: LabelMode) -> TrainConfig {
    TrainConfig {
        algorithm: est,
        label_mode: mode,
        n_per_prompt: 6,
        batch_prompts: 5,
        kl_beta: 0.05,
        kl_placement: placement,
        entropy_alpha: 0.01,
        learning_rate: 0.7,
        seed,
        ..TrainConfig::default()
    }
}

fn check_against_reference(seed: u64, est: Estimator, pl: KlPlacement, mode: LabelMode) -> Result<(), TestCaseError> {
    let (ds, init) = task(seed);
    let cfg = config(seed, est, pl, mode);
    let source = match mode {
        LabelMode::GroundTruth => LabelSource::GroundTruth,
        _ => LabelSource::SelfCurrent { n_label: cfg.n_per_prompt },
    };
    let mut state = RunState::new(init.clone());
    let mut expected = init.clone();
    for step in 0..3 {
        let batch = plain_batch(&mut state, &ds, &cfg);
        expected = reference_step(&expected, &init, &batch, step, &cfg, mode != LabelMode::GroundTruth);
        srt_step(&mut state, &batch, &cfg, &source).unwrap();
        prop_assert_eq!(bits(&state.params), bits(&expected));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ground_truth_step_is_a_verifiable_reward_step(seed: u64, est in estimator(), pl in placement()) {
        check_against_reference(seed, est, pl, LabelMode::GroundTruth)?;
    }

    #[test]
    fn self_labels_reuse_the_rollouts(seed: u64, est in estimator(), pl in placement()) {
        check_against_reference(seed, est, pl, LabelMode::SelfCurrent)?;
    }

    #[test]
    fn unanimous_groups_are_fixed_points(seed: u64, est in estimator(), answer in 0usize..5, gt: bool) {
        let (ds, init) = task(seed);
        let mut state = RunState::new(init.clone());
        let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(seed);
        state.params = common::random_params(4, 4, 1.0, &mut rng);
        let cfg = TrainConfig { entropy_alpha: 0.0, ..config(seed, est, KlPlacement::InReward, LabelMode::SelfCurrent) };
        let batch: Vec<BatchItem> = ds.prompts[..5]
            .iter()
            .map(|p| {
                let lp = state.params.log_prob(p, answer).unwrap();
                let r = srt_core::policy::Rollout { prompt_id: p.id, answer, logprob: lp, parseable: answer != 4 };
                BatchItem { prompt: p.clone(), epoch: 0, rollouts: Some(vec![r; cfg.n_per_prompt]) }
            })
            .collect();
        let source = if gt { LabelSource::GroundTruth } else { LabelSource::SelfCurrent { n_label: cfg.n_per_prompt } };
        let before = state.params.clone();
        srt_step(&mut state, &batch, &cfg, &source).unwrap();
        prop_assert_eq!(bits(&state.params), bits(&before));
    }

    #[test]
    fn filtered_batches_meet_the_threshold(seed: u64, threshold in 0.05f64..0.9) {
        let (ds, init) = task(seed);
        let cfg = TrainConfig { filter_threshold: Some(threshold), ..config(seed, Estimator::Rloo, KlPlacement::InReward, LabelMode::SelfCurrent) };
        let mut state = RunState::new(init);
        let batch = dynamic_filter_batch(&mut state, &ds, &cfg).unwrap();
        for item in &batch {
            let answers: Vec<usize> = item.rollouts.as_ref().unwrap().iter().map(|r| r.answer).collect();
            prop_assert!(majority_vote(item.prompt.id, &answers, 4).majority_fraction >= threshold);
        }
    }
}

#[test]
fn training_leaves_the_base_untouched_and_ignores_eval_k() {
    let (ds, init) = task(9);
    let run = |eval_k| {
        let cfg = TrainConfig { steps: 30, eval_every: 10, eval_k, ..config(9, Estimator::Rloo, KlPlacement::InReward, LabelMode::SelfCurrent) };
        let inputs = RunInputs { train: &ds, eval: &ds, init: init.clone(), offline_labels: None };
        run_training(inputs, &cfg, &mut NoObserver).unwrap()
    };
    let (a, b) = (run(4), run(16));
    assert_eq!(a.base_params(), &init);
    assert_ne!(a.params, init);
    assert_eq!(bits(&a.params), bits(&b.params));
}
