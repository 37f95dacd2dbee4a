mod common;

use proptest::prelude::*;

use srt_core::rl_core::{
    assemble_gradient, grpo_advantage, mean_baseline_advantage, rloo_advantage, Estimator, SurrogateConfig,
};
use srt_core::trainer::KlPlacement;

use common::{finite_difference_violation, gradient_case};

fn rewards() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..40)
}

fn estimator() -> impl Strategy<Value = Estimator> {
    prop_oneof![Just(Estimator::MeanBaseline), Just(Estimator::Rloo), Just(Estimator::Grpo)]
}

fn placement() -> impl Strategy<Value = KlPlacement> {
    prop_oneof![Just(KlPlacement::InReward), Just(KlPlacement::InLoss)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn baselines_sum_to_zero(r in rewards()) {
        let rloo: f64 = rloo_advantage(0, &r).unwrap().values.iter().sum();
        let mb: f64 = mean_baseline_advantage(0, &r).unwrap().values.iter().sum();
        prop_assert!(rloo.abs() < 1e-9 && mb.abs() < 1e-9);
    }

    #[test]
    fn rloo_is_rescaled_mean_baseline(r in rewards()) {
        let n = r.len() as f64;
        let rloo = rloo_advantage(0, &r).unwrap().values;
        let mb = mean_baseline_advantage(0, &r).unwrap().values;
        for (a, b) in rloo.iter().zip(&mb) {
            prop_assert!((a - n / (n - 1.0) * b).abs() < 1e-12);
        }
    }

    #[test]
    fn grpo_is_standardized(r in rewards()) {
        let a = grpo_advantage(0, &r, 1e-6).unwrap().values;
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equal_binary_rewards_give_zero_gradient(seed: u64, est in estimator(), value: bool) {
        let mut case = gradient_case(seed, est, 0.0, KlPlacement::InReward);
        let r = if value { 1.0 } else { 0.0 };
        for (group, adv) in case.groups.iter_mut() {
            group.rewards = vec![r; group.rollouts.len()];
            *adv = srt_core::rl_core::compute_advantage(est, group.prompt.id, &group.rewards, 1e-6).unwrap();
        }
        let (g, _) = assemble_gradient(&case.groups, &case.params, &case.reference, &SurrogateConfig::default()).unwrap();
        prop_assert!(g.is_zero());
    }

    #[test]
    fn gradient_ignores_group_order(seed: u64, est in estimator(), alpha in prop_oneof![Just(0.0), Just(0.01)], pl in placement()) {
        let case = gradient_case(seed, est, alpha, pl);
        let (a, _) = assemble_gradient(&case.groups, &case.params, &case.reference, &case.surrogate).unwrap();
        let mut reversed = case.groups.clone();
        reversed.reverse();
        let (b, _) = assemble_gradient(&reversed, &case.params, &case.reference, &case.surrogate).unwrap();
        for (x, y) in a.flat().iter().zip(b.flat()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences(seed: u64, est in estimator(), alpha in prop_oneof![Just(0.0), Just(0.01)], pl in placement()) {
        let case = gradient_case(seed, est, alpha, pl);
        let worst = finite_difference_violation(&case, 1e-5, 1e-4, 1e-8);
        prop_assert!(worst <= 0.0, "violation {}", worst);
    }
}

#[test]
fn small_group_grpo_edge() {
    let a = grpo_advantage(0, &[1.0, 1.0, 1.0], 1e-6).unwrap();
    assert!(a.values.iter().all(|&x| x == 0.0));
}
